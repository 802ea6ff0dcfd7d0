use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Task;
use super::model::Model;
use super::train::infer;
use super::Result;
use crate::fusion::FusionMask;
use crate::geometry::{
    average_drift, integrate_relative, path_distances, relative_rmse, segment_errors, segment_lengths_for, Drift,
    GlobalPose, MetricsAccumulator, RelativePose,
};
use crate::simulator::{derive_seed, rng_for, Episode};

pub(crate) const EVAL_STREAM: u64 = 0x6576_616c_0000;

/// Per-frame model outputs of one episode, frames `1..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePrediction {
    pub episode: u64,
    pub rows: Vec<Vec<f64>>,
}

/// Selection rates of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub episode: u64,
    pub frame: usize,
    pub rate_a: f64,
    pub rate_b: f64,
    pub mask_a: Vec<f64>,
    pub mask_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Meters.
    pub t_rmse: f64,
    /// Degrees.
    pub r_rmse: f64,
    pub drift: Option<Drift>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean over evaluation passes.
    pub scores: Scores,
    /// Standard deviation of `t_rmse` / `r_rmse` over passes (zero for
    /// deterministic models).
    pub t_rmse_std: f64,
    pub r_rmse_std: f64,
    pub passes: Vec<Scores>,
    /// Outputs of the first pass.
    pub predictions: Vec<EpisodePrediction>,
    pub masks: Vec<MaskRecord>,
}

/// Predicted relative poses of an episode (relative task) or absolute
/// poses with a normalized quaternion (global task).
pub fn predicted_globals(task: Task, ep: &Episode, rows: &[Vec<f64>]) -> Vec<GlobalPose> {
    match task {
        Task::RelativeOdometry => {
            let rel: Vec<RelativePose> = rows.iter().map(|r| RelativePose::from_slice(r)).collect();
            integrate_relative(&rel, &ep.gt_global[0])
        }
        Task::GlobalRelocalization => std::iter::once(ep.gt_global[0])
            .chain(rows.iter().map(|r| normalized_global(r)))
            .collect(),
    }
}

pub fn normalized_global(r: &[f64]) -> GlobalPose {
    let n = (r[3] * r[3] + r[4] * r[4] + r[5] * r[5] + r[6] * r[6]).sqrt().max(1e-12);
    GlobalPose {
        p: [r[0], r[1], r[2]],
        q: [r[3] / n, r[4] / n, r[5] / n, r[6] / n],
    }
}

/// RMSE and segment drift of predictions against the episodes' ground
/// truth. `predictions[i]` must belong to `episodes[i]`.
pub fn score(task: Task, episodes: &[Episode], predictions: &[EpisodePrediction]) -> Result<Scores> {
    let mut acc = MetricsAccumulator::new();
    let (mut t_sq, mut r_sq, mut n) = (0.0, 0.0, 0usize);
    let mut segments = Vec::new();
    for (ep, pred) in episodes.iter().zip(predictions) {
        match task {
            Task::RelativeOdometry => {
                for (row, gt) in pred.rows.iter().zip(&ep.gt_relative) {
                    acc.push(&RelativePose::from_slice(row), gt);
                }
            }
            Task::GlobalRelocalization => {
                for (row, gt) in pred.rows.iter().zip(&ep.gt_global[1..]) {
                    let g = normalized_global(row);
                    let iso = g.to_isometry().inverse() * gt.to_isometry();
                    t_sq += (0..3).map(|i| (g.p[i] - gt.p[i]).powi(2)).sum::<f64>();
                    r_sq += iso.rotation.angle().powi(2);
                    n += 1;
                }
            }
        }
        let globals = predicted_globals(task, ep, &pred.rows);
        let total = path_distances(&ep.gt_global).last().copied().unwrap_or(0.0);
        segments.extend(segment_errors(&ep.gt_global, &globals, &segment_lengths_for(total))?);
    }
    let (t_rmse, r_rmse) = match task {
        Task::RelativeOdometry => relative_rmse(&acc)?,
        Task::GlobalRelocalization => {
            let n = n.max(1) as f64;
            ((t_sq / n).sqrt(), (r_sq / n).sqrt().to_degrees())
        }
    };
    Ok(Scores {
        t_rmse,
        r_rmse,
        drift: average_drift(&segments),
    })
}

fn pass(model: &Model, episodes: &[Episode], seed: u64, tau: f64) -> Result<(Vec<EpisodePrediction>, Vec<MaskRecord>)> {
    let mut rng = rng_for(seed, EVAL_STREAM);
    let mut preds: Vec<EpisodePrediction> = episodes
        .iter()
        .map(|e| EpisodePrediction {
            episode: e.id,
            rows: Vec::with_capacity(e.len().saturating_sub(1)),
        })
        .collect();
    let index: std::collections::HashMap<u64, usize> = episodes.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let mut masks = Vec::new();
    infer(model, episodes, &mut rng, tau, &mut |v| {
        let width = v.y.shape()[1];
        for (b, ep) in v.batch.iter().enumerate() {
            preds[index[&ep.id]].rows.push(v.y.data()[b * width..(b + 1) * width].to_vec());
            masks.push(mask_record(ep.id, v.frame, v.mask, b));
        }
    })?;
    masks.sort_by_key(|m| (index[&m.episode], m.frame));
    Ok((preds, masks))
}

fn mask_record(episode: u64, frame: usize, mask: &FusionMask, b: usize) -> MaskRecord {
    let (ra, rb) = mask.selection_rates()[b];
    MaskRecord {
        episode,
        frame,
        rate_a: ra,
        rate_b: rb,
        mask_a: mask.s1.row(b).to_vec(),
        mask_b: mask.s2.row(b).to_vec(),
    }
}

/// Scores a model on `episodes`. Hard-fusion models are run once per
/// evaluation seed with freshly sampled masks; others once.
pub fn evaluate(model: &Model, episodes: &[Episode]) -> Result<Evaluation> {
    let cfg = &model.config;
    let seeds: Vec<u64> = if model.is_hard() {
        (0..cfg.train.eval_seeds as u64).map(|k| derive_seed(cfg.seed, k)).collect()
    } else {
        vec![derive_seed(cfg.seed, 0)]
    };
    let runs: Vec<Result<(Vec<EpisodePrediction>, Vec<MaskRecord>, Scores)>> = seeds
        .par_iter()
        .map(|&s| {
            let (p, m) = pass(model, episodes, s, cfg.train.tau_end)?;
            let sc = score(cfg.task, episodes, &p)?;
            Ok((p, m, sc))
        })
        .collect();
    let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<Scores> = runs.iter().map(|r| r.2).collect();
    let (predictions, masks, _) = runs.swap_remove(0);
    let mean_std = |f: fn(&Scores) -> f64| {
        let n = passes.len() as f64;
        let mean = passes.iter().map(f).sum::<f64>() / n;
        let var = passes.iter().map(|s| (f(s) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (t_rmse, t_rmse_std) = mean_std(|s| s.t_rmse);
    let (r_rmse, r_rmse_std) = mean_std(|s| s.r_rmse);
    let drift = if passes.iter().all(|s| s.drift.is_some()) {
        let n = passes.len() as f64;
        Some(Drift {
            t_rel: passes.iter().map(|s| s.drift.unwrap().t_rel).sum::<f64>() / n,
            r_rel: passes.iter().map(|s| s.drift.unwrap().r_rel).sum::<f64>() / n,
            segments: passes[0].drift.unwrap().segments,
        })
    } else {
        None
    };
    Ok(Evaluation {
        scores: Scores { t_rmse, r_rmse, drift },
        t_rmse_std,
        r_rmse_std,
        passes,
        predictions,
        masks,
    })
}
