use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::model::{frame_batch, Model};
use super::{HarnessError, Result};
use crate::fusion::{anneal, FusionMask, HardContext, HardGradient, NoiseSource};
use crate::nn::{adam_step, HiddenValues, ParameterStore};
use crate::simulator::{rng_for, Episode};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const SHUFFLE_STREAM: u64 = 0x7368_7566_0000;
pub(crate) const NOISE_STREAM: u64 = 0x6e6f_6973;
pub(crate) const VAL_STREAM: u64 = 0x7661_6c00;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Temperature used for the epoch (hard fusion only).
    pub tau: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model after the last epoch.
    pub model: Model,
    /// Parameters of the epoch with the lowest validation loss (the last
    /// epoch when there is no validation split).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Model {
        Model {
            store: self.best.clone(),
            ..self.model.clone()
        }
    }
}

/// Splits episodes into batches of at most `size`, never mixing lengths.
pub fn batches<'a>(episodes: &[&'a Episode], size: usize) -> Vec<Vec<&'a Episode>> {
    let mut out: Vec<Vec<&Episode>> = Vec::new();
    for &ep in episodes {
        match out.last_mut() {
            Some(b) if b.len() < size && b[0].len() == ep.len() => b.push(ep),
            _ => out.push(vec![ep]),
        }
    }
    out
}

/// Trains a freshly initialized model.
pub fn fit(
    config: &ExperimentConfig,
    train: &[Episode],
    val: &[Episode],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let model = Model::build(config)?;
    fit_from(model, train, val, progress)
}

/// Trains `model` in place; see [`fit`].
pub fn fit_from(
    mut model: Model,
    train: &[Episode],
    val: &[Episode],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let config = model.config.clone();
    if train.is_empty() {
        return Err(HarnessError::DatasetShape("training split is empty".into()));
    }
    for ep in train.iter().chain(val) {
        model.check_episode(ep)?;
        if ep.len() < 2 {
            return Err(HarnessError::DatasetShape(format!("episode {} has fewer than 2 frames", ep.id)));
        }
    }
    let tc = &config.train;
    let adam = tc.adam();
    let schedule = tc.schedule();
    let hidden = model.hidden_size();
    let scale = config.model.imu_scale;
    let mut noise_rng = rng_for(config.seed, NOISE_STREAM);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;

    for epoch in 0..tc.epochs {
        let tau = anneal(epoch, &schedule)?;
        let mut order: Vec<&Episode> = train.iter().collect();
        order.shuffle(&mut rng_for(config.seed, SHUFFLE_STREAM ^ epoch as u64));
        let mut weighted = 0.0;
        let mut frames = 0usize;
        for (batch_id, batch) in batches(&order, tc.batch_size).iter().enumerate() {
            let diverged = || HarnessError::DivergedLoss { epoch, batch: batch_id };
            let n = batch[0].len();
            let mut carry = HiddenValues::zeros(batch.len(), hidden);
            let mut start = 1;
            while start < n {
                let end = (start + tc.tbptt).min(n);
                let mut tape = Tape::with_checked(false);
                let p = model.store.bind(&mut tape);
                let mut state = carry.to_tape(&mut tape);
                let mut total: Option<Var> = None;
                for t in start..end {
                    let fb = frame_batch(batch, t, config.task, scale)?;
                    let mut ctx = HardContext {
                        noise: NoiseSource::Rng(&mut noise_rng),
                        tau,
                        gradient: HardGradient::StraightThrough,
                    };
                    let out = model.step(&mut tape, &p, &fb.a, &fb.b, state, model.is_hard().then_some(&mut ctx))?;
                    state = out.state;
                    let l = model.loss(&mut tape, out.y, &fb.gt)?;
                    total = Some(match total {
                        Some(s) => tape.add(s, l)?,
                        None => l,
                    });
                }
                let len = end - start;
                let loss = tape.scale(total.expect("non-empty segment"), 1.0 / len as f64)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(diverged());
                }
                tape.backward(loss)?;
                let grads = model.store.gradients(&tape, &p);
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(diverged());
                }
                adam_step(&mut model.store, &grads, &adam)?;
                carry = HiddenValues::from_tape(&tape, state);
                weighted += value * len as f64;
                frames += len;
                start = end;
            }
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let mut rng = rng_for(config.seed, VAL_STREAM);
            Some(mean_loss(&model, val, &mut rng, tc.tau_end)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: weighted / frames as f64,
            val_loss,
            tau: model.is_hard().then_some(tau),
        };
        progress(&record);
        history.push(record);
        match val_loss {
            Some(v) if v < best_val => {
                best_val = v;
                best = model.store.clone();
                best_epoch = epoch;
            }
            None => {
                best = model.store.clone();
                best_epoch = epoch;
            }
            _ => {}
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
    })
}

/// What an inference pass reports for each processed frame.
pub struct FrameVisit<'a> {
    pub batch: &'a [&'a Episode],
    pub frame: usize,
    pub y: &'a Tensor,
    pub mask: &'a FusionMask,
    pub loss: f64,
}

/// Runs the model over every frame `1..len` of each episode without
/// updating parameters. Hard fusion samples masks from `rng` at `tau`.
pub fn infer(
    model: &Model,
    episodes: &[Episode],
    rng: &mut ChaCha8Rng,
    tau: f64,
    visit: &mut dyn FnMut(FrameVisit<'_>),
) -> Result<()> {
    let cfg = &model.config;
    for ep in episodes {
        model.check_episode(ep)?;
    }
    let refs: Vec<&Episode> = episodes.iter().collect();
    for batch in batches(&refs, cfg.train.batch_size) {
        let n = batch[0].len();
        let mut carry = HiddenValues::zeros(batch.len(), model.hidden_size());
        let mut start = 1;
        while start < n {
            let end = (start + cfg.train.tbptt).min(n);
            let mut tape = Tape::with_checked(false);
            let p = model.store.bind(&mut tape);
            let mut state = carry.to_tape(&mut tape);
            for t in start..end {
                let fb = frame_batch(&batch, t, cfg.task, cfg.model.imu_scale)?;
                let mut ctx = HardContext {
                    noise: NoiseSource::Rng(&mut *rng),
                    tau,
                    gradient: HardGradient::StraightThrough,
                };
                let out = model.step(&mut tape, &p, &fb.a, &fb.b, state, model.is_hard().then_some(&mut ctx))?;
                state = out.state;
                let l = model.loss(&mut tape, out.y, &fb.gt)?;
                visit(FrameVisit {
                    batch: &batch,
                    frame: t,
                    y: tape.value(out.y),
                    mask: &out.mask,
                    loss: tape.value(l).data()[0],
                });
            }
            carry = HiddenValues::from_tape(&tape, state);
            start = end;
        }
    }
    Ok(())
}

/// Frame-weighted mean task loss over `episodes`.
pub fn mean_loss(model: &Model, episodes: &[Episode], rng: &mut ChaCha8Rng, tau: f64) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    infer(model, episodes, rng, tau, &mut |v| {
        sum += v.loss * v.batch.len() as f64;
        n += v.batch.len();
    })?;
    Ok(sum / n as f64)
}
