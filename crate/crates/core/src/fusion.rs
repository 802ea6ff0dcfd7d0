//! Direct, soft and hard fusion of two equal-length modality features.
//!
//! All three strategies map `(a1, a2)`, each `[batch, d]`, to a fused
//! `[batch, 2d]` feature and report the realized mask on every call.
//!
//! * Direct fusion concatenates.
//! * Soft fusion multiplies each half by a sigmoid mask computed from the
//!   concatenated features, one linear head per modality.
//! * Hard fusion draws a binary keep/drop decision per feature from a learned
//!   two-class categorical. Class weights come from `relu(FC([a1; a2]))` plus a
//!   small floor, sampling uses the Gumbel-max trick, and gradients flow
//!   through the Gumbel-Softmax relaxation with a straight-through estimator.
//!
//! Class index 0 is "keep", index 1 is "drop". Exact ties in the perturbed
//! log-weights go to "keep".

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Bound, Linear, NnError, ParameterStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Added to the relu class weights before taking the log.
pub const PROB_FLOOR: f64 = 1e-8;
/// Uniform draws are clamped to `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid temperature schedule: {0}")]
    BadSchedule(String),
    #[error("frozen noise has shape {got:?}, expected {want:?}")]
    NoiseShape { got: Vec<usize>, want: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Continuous weights in `[0, 1]`.
    Soft,
    /// Binary keep/drop decisions.
    Hard,
    /// Constant all-ones mask of direct fusion.
    Fixed,
}

/// Realized masks for one forward pass, each `[batch, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMask {
    pub s1: Tensor,
    pub s2: Tensor,
    pub kind: MaskKind,
}

impl FusionMask {
    pub fn ones(batch: usize, d: usize) -> Self {
        Self {
            s1: Tensor::ones(&[batch, d]),
            s2: Tensor::ones(&[batch, d]),
            kind: MaskKind::Fixed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.s1.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.s1.shape()[0]
    }

    /// Range and shape invariants for this mask kind.
    pub fn is_valid(&self) -> bool {
        if self.s1.shape() != self.s2.shape() || self.s1.rank() != 2 {
            return false;
        }
        let all = self.s1.data().iter().chain(self.s2.data());
        match self.kind {
            MaskKind::Soft => all.clone().all(|&v| (0.0..=1.0).contains(&v)),
            MaskKind::Hard => all.clone().all(|&v| v == 0.0 || v == 1.0),
            MaskKind::Fixed => all.clone().all(|&v| v == 1.0),
        }
    }

    /// Mean mask value per batch row for each modality.
    pub fn selection_rates(&self) -> Vec<(f64, f64)> {
        let d = self.feature_dim() as f64;
        (0..self.batch())
            .map(|b| {
                let r1 = self.s1.row(b).iter().sum::<f64>() / d;
                let r2 = self.s2.row(b).iter().sum::<f64>() / d;
                (r1, r2)
            })
            .collect()
    }
}

/// Floored nonnegative class weights, `[batch, 2d, 2]`: rows `0..d` belong to
/// the first modality's mask, rows `d..2d` to the second.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits {
    pub alpha: Tensor,
}

impl ClassLogits {
    /// Normalized probability of the keep class, `[batch, 2d]`.
    pub fn keep_probabilities(&self) -> Tensor {
        let shape = self.alpha.shape();
        let data = self
            .alpha
            .data()
            .chunks(2)
            .map(|c| c[0] / (c[0] + c[1]))
            .collect();
        Tensor::new(vec![shape[0], shape[1]], data).expect("shape")
    }
}

/// Gumbel perturbations, same shape as the class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub eps: Tensor,
}

/// `eps = -ln(-ln(u))` elementwise, with `u` clamped away from 0 and 1.
pub fn gumbel_sample(u: &Tensor) -> GumbelNoise {
    GumbelNoise {
        eps: u.map(|x| {
            let x = x.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            -(-x.ln()).ln()
        }),
    }
}

/// Draws Gumbel noise of `shape` from `rng`.
pub fn draw_gumbel(rng: &mut dyn RngCore, shape: &[usize]) -> GumbelNoise {
    let n = shape.iter().product();
    let u = (0..n).map(|_| rng.gen::<f64>()).collect();
    gumbel_sample(&Tensor::new(shape.to_vec(), u).expect("shape"))
}

/// Relaxed class probabilities `softmax((log_pi + eps) / tau)` over the last
/// axis.
pub fn gumbel_softmax(log_pi: &Tensor, eps: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(FusionError::NonPositiveTemperature(tau));
    }
    if log_pi.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gumbel_softmax",
            lhs: log_pi.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    let pre = Tensor::new_unchecked(
        log_pi.shape().to_vec(),
        log_pi
            .data()
            .iter()
            .zip(eps.data())
            .map(|(l, e)| (l + e) / tau)
            .collect(),
    )?;
    Ok(pre.softmax(log_pi.rank() - 1)?)
}

/// Linear temperature decay from `tau_start` at epoch 0 to `tau_end` at
/// `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_epochs: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_start: 1.0,
            tau_end: 0.5,
            total_epochs: 50,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0) || self.tau_start < self.tau_end || self.total_epochs == 0 {
            return Err(FusionError::BadSchedule(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn anneal(epoch: usize, schedule: &TemperatureSchedule) -> Result<f64> {
    schedule.validate()?;
    if epoch > schedule.total_epochs {
        return Err(FusionError::EpochOutOfRange {
            epoch,
            total: schedule.total_epochs,
        });
    }
    if epoch == schedule.total_epochs {
        return Ok(schedule.tau_end);
    }
    let frac = epoch as f64 / schedule.total_epochs as f64;
    Ok(schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Direct,
    Soft,
    Hard,
}

/// Where hard fusion gets its Gumbel noise.
pub enum NoiseSource<'a> {
    Rng(&'a mut dyn RngCore),
    /// Pre-drawn perturbations `[batch, 2d, 2]`.
    Frozen(&'a Tensor),
}

/// Backward path of hard fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardGradient {
    /// Binary mask forward, relaxed gradient backward.
    StraightThrough,
    /// Relaxed probabilities both ways (the differentiable surrogate).
    Relaxed,
}

/// Per-call settings consumed only by hard fusion.
pub struct HardContext<'a> {
    pub noise: NoiseSource<'a>,
    pub tau: f64,
    pub gradient: HardGradient,
}

pub struct FusionOutput {
    pub z: Var,
    pub mask: FusionMask,
    pub logits: Option<ClassLogits>,
}

fn check_pair(tape: &Tape, a1: Var, a2: Var) -> Result<(usize, usize)> {
    let (s1, s2) = (tape.shape(a1), tape.shape(a2));
    if s1 != s2 || s1.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: s1.to_vec(),
            rhs: s2.to_vec(),
        }
        .into());
    }
    Ok((s1[0], s1[1]))
}

pub fn fuse_direct(tape: &mut Tape, a1: Var, a2: Var) -> Result<FusionOutput> {
    let (batch, d) = check_pair(tape, a1, a2)?;
    let z = tape.concat(a1, a2, 1)?;
    Ok(FusionOutput {
        z,
        mask: FusionMask::ones(batch, d),
        logits: None,
    })
}

/// Two sigmoid heads over `[a1; a2]`, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftFusion {
    pub head1: Linear,
    pub head2: Linear,
}

impl SoftFusion {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            head1: Linear::new(store, &format!("{name}.s1"), 2 * d, d, rng)?,
            head2: Linear::new(store, &format!("{name}.s2"), 2 * d, d, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, a1: Var, a2: Var) -> Result<FusionOutput> {
        let (_, d) = check_pair(tape, a1, a2)?;
        if 2 * d != self.head1.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_soft",
                lhs: vec![2 * d],
                rhs: vec![self.head1.in_dim],
            }
            .into());
        }
        let x = tape.concat(a1, a2, 1)?;
        let l1 = self.head1.forward(tape, p, x)?;
        let s1 = tape.sigmoid(l1)?;
        let l2 = self.head2.forward(tape, p, x)?;
        let s2 = tape.sigmoid(l2)?;
        let m1 = tape.mul(a1, s1)?;
        let m2 = tape.mul(a2, s2)?;
        let z = tape.concat(m1, m2, 1)?;
        Ok(FusionOutput {
            z,
            mask: FusionMask {
                s1: tape.value(s1).clone(),
                s2: tape.value(s2).clone(),
                kind: MaskKind::Soft,
            },
            logits: None,
        })
    }
}

/// Layers producing the class weights of both hard masks.
#[derive(Debug, Clone, PartialEq)]
pub enum LogitHeads {
    /// One layer emitting `2d x 2` weights, split in half between the masks.
    Shared(Linear),
    /// One layer per mask, each emitting `d x 2` weights.
    Independent(Linear, Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardFusion {
    pub heads: LogitHeads,
    pub d: usize,
}

impl HardFusion {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        shared_logits: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let heads = if shared_logits {
            LogitHeads::Shared(Linear::new(store, &format!("{name}.alpha"), 2 * d, 4 * d, rng)?)
        } else {
            LogitHeads::Independent(
                Linear::new(store, &format!("{name}.alpha1"), 2 * d, 2 * d, rng)?,
                Linear::new(store, &format!("{name}.alpha2"), 2 * d, 2 * d, rng)?,
            )
        };
        Ok(Self { heads, d })
    }

    /// Floored class weights `relu(FC([a1; a2])) + PROB_FLOOR` as a
    /// `[batch, 2d, 2]` tape variable.
    pub fn class_logits(&self, tape: &mut Tape, p: &Bound, a1: Var, a2: Var) -> Result<(Var, ClassLogits)> {
        let (batch, d) = check_pair(tape, a1, a2)?;
        if d != self.d {
            return Err(TensorError::ShapeMismatch {
                op: "class_logits",
                lhs: vec![d],
                rhs: vec![self.d],
            }
            .into());
        }
        let x = tape.concat(a1, a2, 1)?;
        let raw = match &self.heads {
            LogitHeads::Shared(fc) => fc.forward(tape, p, x)?,
            LogitHeads::Independent(f1, f2) => {
                let r1 = f1.forward(tape, p, x)?;
                let r2 = f2.forward(tape, p, x)?;
                tape.concat(r1, r2, 1)?
            }
        };
        let alpha = tape.relu(raw)?;
        let alpha = tape.add_scalar(alpha, PROB_FLOOR)?;
        let alpha = tape.reshape(alpha, &[batch, 2 * d, 2])?;
        let values = ClassLogits {
            alpha: tape.value(alpha).clone(),
        };
        Ok((alpha, values))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a1: Var,
        a2: Var,
        ctx: &mut HardContext<'_>,
    ) -> Result<FusionOutput> {
        if !(ctx.tau > 0.0) {
            return Err(FusionError::NonPositiveTemperature(ctx.tau));
        }
        let (alpha, logits) = self.class_logits(tape, p, a1, a2)?;
        let shape = tape.shape(alpha).to_vec();
        let (batch, d) = (shape[0], self.d);
        let eps = match &mut ctx.noise {
            NoiseSource::Rng(rng) => draw_gumbel(&mut **rng, &shape).eps,
            NoiseSource::Frozen(t) => {
                if t.shape() != shape.as_slice() {
                    return Err(FusionError::NoiseShape {
                        got: t.shape().to_vec(),
                        want: shape,
                    });
                }
                (*t).clone()
            }
        };
        let log_pi = tape.log(alpha)?;
        let eps = tape.constant(eps);
        let perturbed = tape.add(log_pi, eps)?;
        let scaled = tape.scale(perturbed, 1.0 / ctx.tau)?;
        let relaxed = tape.softmax(scaled, 2)?;

        let (kept, kind) = match ctx.gradient {
            HardGradient::StraightThrough => {
                let pv = tape.value(perturbed).data();
                let one_hot: Vec<f64> = pv
                    .chunks(2)
                    .flat_map(|c| if c[0] >= c[1] { [1.0, 0.0] } else { [0.0, 1.0] })
                    .collect();
                let hard = Tensor::new(shape.clone(), one_hot)?;
                (tape.straight_through(hard, relaxed)?, MaskKind::Hard)
            }
            HardGradient::Relaxed => (relaxed, MaskKind::Soft),
        };
        let keep = tape.slice(kept, 2, 0, 1)?;
        let keep = tape.reshape(keep, &[batch, 2 * d])?;
        let x = tape.concat(a1, a2, 1)?;
        let z = tape.mul(x, keep)?;
        let kv = tape.value(keep);
        let mask = FusionMask {
            s1: kv.slice(1, 0, d)?,
            s2: kv.slice(1, d, 2 * d)?,
            kind,
        };
        Ok(FusionOutput {
            z,
            mask,
            logits: Some(logits),
        })
    }
}

/// A fusion strategy with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionLayer {
    Direct,
    Soft(SoftFusion),
    Hard(HardFusion),
}

impl FusionLayer {
    pub fn new(
        kind: FusionKind,
        store: &mut ParameterStore,
        d: usize,
        shared_logits: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            FusionKind::Direct => FusionLayer::Direct,
            FusionKind::Soft => FusionLayer::Soft(SoftFusion::new(store, "fusion", d, rng)?),
            FusionKind::Hard => FusionLayer::Hard(HardFusion::new(store, "fusion", d, shared_logits, rng)?),
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionLayer::Direct => FusionKind::Direct,
            FusionLayer::Soft(_) => FusionKind::Soft,
            FusionLayer::Hard(_) => FusionKind::Hard,
        }
    }

    /// `ctx` is required for hard fusion and ignored otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a1: Var,
        a2: Var,
        ctx: Option<&mut HardContext<'_>>,
    ) -> Result<FusionOutput> {
        match self {
            FusionLayer::Direct => fuse_direct(tape, a1, a2),
            FusionLayer::Soft(s) => s.forward(tape, p, a1, a2),
            FusionLayer::Hard(h) => {
                let ctx = ctx.expect("hard fusion needs a noise context");
                h.forward(tape, p, a1, a2, ctx)
            }
        }
    }
}
