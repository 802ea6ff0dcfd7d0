use rand::Rng;

use super::config::{ExperimentConfig, FusionChoice, Task};
use super::{HarnessError, Result};
use crate::fusion::{FusionKind, FusionLayer, FusionMask, HardContext, MaskKind};
use crate::geometry::{global_pose_loss, relative_pose_loss};
use crate::nn::{
    Activation, BiLstmEncoder, Bound, FeedForwardEncoder, HiddenState, ParameterStore, TemporalModel,
};
use crate::simulator::{rng_for, Episode, IMU_DIM};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const INIT_STREAM: u64 = 0x696e_6974;

/// Encoders, fusion, temporal model and regressor for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ExperimentConfig,
    pub store: ParameterStore,
    pub encoder_a: Option<FeedForwardEncoder>,
    pub encoder_b: Option<BiLstmEncoder>,
    pub fusion: Option<FusionLayer>,
    pub temporal: TemporalModel,
}

/// Output of one recurrent step over a batch.
pub struct StepOutput {
    pub y: Var,
    pub state: HiddenState,
    pub mask: FusionMask,
}

impl Model {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, INIT_STREAM);
        Self::build_with(config, &mut rng)
    }

    pub fn build_with(config: &ExperimentConfig, rng: &mut impl Rng) -> Result<Self> {
        let m = &config.model;
        let mut store = ParameterStore::new();
        let encoder_a = if config.fusion.uses_a() {
            let mut dims = vec![m.obs_dim];
            dims.extend(&m.encoder_a_hidden);
            dims.push(m.d);
            Some(FeedForwardEncoder::new(
                &mut store,
                "enc_a",
                &dims,
                Activation::Relu,
                Activation::Tanh,
                rng,
            )?)
        } else {
            None
        };
        let encoder_b = if config.fusion.uses_b() {
            Some(BiLstmEncoder::new(&mut store, "enc_b", IMU_DIM, m.encoder_b_hidden, m.d, rng)?)
        } else {
            None
        };
        let fusion = match config.fusion {
            FusionChoice::NoneA | FusionChoice::NoneB => None,
            FusionChoice::Direct => Some(FusionLayer::new(FusionKind::Direct, &mut store, m.d, m.shared_logits, rng)?),
            FusionChoice::Soft => Some(FusionLayer::new(FusionKind::Soft, &mut store, m.d, m.shared_logits, rng)?),
            FusionChoice::Hard => Some(FusionLayer::new(FusionKind::Hard, &mut store, m.d, m.shared_logits, rng)?),
        };
        let temporal = TemporalModel::new(
            &mut store,
            "temporal",
            self_fused_dim(config),
            m.temporal_hidden,
            config.task.output_dim(),
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder_a,
            encoder_b,
            fusion,
            temporal,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self_fused_dim(&self.config)
    }

    pub fn is_hard(&self) -> bool {
        self.config.fusion == FusionChoice::Hard
    }

    pub fn hidden_size(&self) -> usize {
        self.config.model.temporal_hidden
    }

    /// Encode, fuse and advance the temporal model by one frame.
    ///
    /// `a` is `[batch, obs_dim]`, `b` is `[batch, m, 6]` (already scaled).
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a: &Tensor,
        b: &Tensor,
        state: HiddenState,
        ctx: Option<&mut HardContext<'_>>,
    ) -> Result<StepOutput> {
        let batch = a.shape()[0];
        let d = self.config.model.d;
        let feat_a = match &self.encoder_a {
            Some(enc) => {
                let x = tape.constant(a.clone());
                Some(enc.forward(tape, p, x)?)
            }
            None => None,
        };
        let feat_b = match &self.encoder_b {
            Some(enc) => {
                let x = tape.constant(b.clone());
                Some(enc.forward(tape, p, x)?)
            }
            None => None,
        };
        let (z, mask) = match (&self.fusion, feat_a, feat_b) {
            (Some(layer), Some(fa), Some(fb)) => {
                let out = layer.forward(tape, p, fa, fb, ctx)?;
                (out.z, out.mask)
            }
            (None, Some(fa), None) => (fa, baseline_mask(batch, d, true)),
            (None, None, Some(fb)) => (fb, baseline_mask(batch, d, false)),
            _ => unreachable!("encoders follow the fusion choice"),
        };
        let (y, state) = self.temporal.step(tape, p, z, state)?;
        Ok(StepOutput { y, state, mask })
    }

    /// Task loss of one step output against `gt` (`[batch, 6]` or `[batch, 7]`).
    pub fn loss(&self, tape: &mut Tape, y: Var, gt: &Tensor) -> Result<Var> {
        let l = &self.config.loss;
        Ok(match self.config.task {
            Task::RelativeOdometry => relative_pose_loss(tape, y, gt, l.lambda_relative, l.norm)?,
            Task::GlobalRelocalization => global_pose_loss(tape, y, gt, l.lambda_global)?,
        })
    }

    /// Checks that episodes match the model's input widths.
    pub fn check_episode(&self, ep: &Episode) -> Result<()> {
        let frame = ep
            .frames
            .first()
            .ok_or_else(|| HarnessError::DatasetShape(format!("episode {} has no frames", ep.id)))?;
        if frame.modality_a.len() != self.config.model.obs_dim {
            return Err(HarnessError::DimensionMismatch(format!(
                "episode {} has modality A width {}, model expects {}",
                ep.id,
                frame.modality_a.len(),
                self.config.model.obs_dim
            )));
        }
        if frame.modality_b.first().map_or(0, Vec::len) != IMU_DIM {
            return Err(HarnessError::DimensionMismatch(format!(
                "episode {} has inertial width {}, model expects {IMU_DIM}",
                ep.id,
                frame.modality_b.first().map_or(0, Vec::len)
            )));
        }
        Ok(())
    }
}

fn self_fused_dim(config: &ExperimentConfig) -> usize {
    match config.fusion {
        FusionChoice::NoneA | FusionChoice::NoneB => config.model.d,
        _ => 2 * config.model.d,
    }
}

/// Single-modality runs report the used modality as fully selected and the
/// other as fully blocked.
fn baseline_mask(batch: usize, d: usize, uses_a: bool) -> FusionMask {
    let (on, off) = (Tensor::ones(&[batch, d]), Tensor::zeros(&[batch, d]));
    let (s1, s2) = if uses_a { (on, off) } else { (off, on) };
    FusionMask {
        s1,
        s2,
        kind: MaskKind::Fixed,
    }
}

/// Inputs and targets of one frame index across a batch of episodes.
pub struct FrameBatch {
    pub a: Tensor,
    pub b: Tensor,
    pub gt: Tensor,
}

/// Gathers frame `t` (>= 1) of every episode in `batch`.
pub fn frame_batch(batch: &[&Episode], t: usize, task: Task, imu_scale: f64) -> Result<FrameBatch> {
    let n = batch.len();
    let obs_dim = batch[0].frames[t].modality_a.len();
    let m = batch[0].frames[t].modality_b.len();
    let mut a = Vec::with_capacity(n * obs_dim);
    let mut b = Vec::with_capacity(n * m * IMU_DIM);
    let mut gt = Vec::with_capacity(n * task.output_dim());
    for ep in batch {
        let frame = &ep.frames[t];
        if frame.modality_a.len() != obs_dim || frame.modality_b.len() != m {
            return Err(HarnessError::DatasetShape(format!(
                "episode {} frame {t} differs in shape from its batch",
                ep.id
            )));
        }
        a.extend_from_slice(&frame.modality_a);
        for s in &frame.modality_b {
            if s.len() != IMU_DIM {
                return Err(HarnessError::DatasetShape(format!("episode {} frame {t} has a bad inertial sample", ep.id)));
            }
            b.extend(s.iter().map(|v| v * imu_scale));
        }
        match task {
            Task::RelativeOdometry => gt.extend_from_slice(&ep.gt_relative[t - 1].to_array()),
            Task::GlobalRelocalization => gt.extend_from_slice(&ep.gt_global[t].to_array()),
        }
    }
    Ok(FrameBatch {
        a: Tensor::new(vec![n, obs_dim], a)?,
        b: Tensor::new(vec![n, m, IMU_DIM], b)?,
        gt: Tensor::new(vec![n, task.output_dim()], gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fusion: FusionChoice) -> ExperimentConfig {
        ExperimentConfig {
            fusion,
            ..Default::default()
        }
    }

    #[test]
    fn fused_widths() {
        assert_eq!(Model::build(&cfg(FusionChoice::Direct)).unwrap().temporal.in_dim(), 128);
        assert_eq!(Model::build(&cfg(FusionChoice::NoneA)).unwrap().temporal.in_dim(), 64);
        let none_a = Model::build(&cfg(FusionChoice::NoneA)).unwrap();
        assert!(none_a.encoder_b.is_none() && none_a.fusion.is_none());
    }

    #[test]
    fn initialization_is_deterministic() {
        for f in FusionChoice::ALL {
            let a = Model::build(&cfg(f)).unwrap();
            let b = Model::build(&cfg(f)).unwrap();
            assert_eq!(a.store.flat_values(), b.store.flat_values());
        }
    }
}
