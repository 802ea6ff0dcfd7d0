use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, EpisodePrediction, Evaluation, MaskRecord};
use super::masks::mask_report;
use super::model::Model;
use super::train::{fit, EpochRecord, TrainOutcome};
use super::{io_err, HarnessError, Result};
use crate::nn::ParameterStore;
use crate::simulator::{read_episodes, DatasetHeader, Episode};

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("masks.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn mask_report(&self) -> PathBuf {
        self.root.join("mask_report.csv")
    }
}

pub fn load_split(path: &Path) -> Result<(DatasetHeader, Vec<Episode>)> {
    if !path.exists() {
        return Err(HarnessError::DatasetMissing(path.to_path_buf()));
    }
    let file = File::open(path).map_err(io_err(path))?;
    Ok(read_episodes(BufReader::new(file))?)
}

/// Fails if any episode id occurs in more than one split.
pub fn check_disjoint(splits: &[(&str, &[Episode])]) -> Result<()> {
    let mut seen: HashMap<u64, &str> = HashMap::new();
    for (name, eps) in splits {
        for ep in *eps {
            if let Some(first) = seen.insert(ep.id, name) {
                if first != *name {
                    return Err(HarnessError::SplitOverlap {
                        id: ep.id,
                        first: first.to_string(),
                        second: name.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ExperimentConfig,
    epoch: usize,
}

pub fn save_checkpoint(path: &Path, store: &ParameterStore, config: &ExperimentConfig, epoch: usize) -> Result<()> {
    let meta = serde_json::to_string(&CheckpointMeta {
        config: config.clone(),
        epoch,
    })?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    store.write_checkpoint(&mut w, &meta)?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Model, usize)> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let (store, meta) = ParameterStore::read_checkpoint(&mut r)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    let mut model = Model::build(&meta.config)?;
    if store.len() != model.store.len() {
        return Err(HarnessError::DimensionMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            store.len(),
            model.store.len()
        )));
    }
    for (want, got) in model.store.iter().zip(store.iter()) {
        if want.name != got.name || want.value.shape() != got.value.shape() {
            return Err(HarnessError::DimensionMismatch(format!(
                "parameter {} {:?} vs checkpoint {} {:?}",
                want.name,
                want.value.shape(),
                got.name,
                got.value.shape()
            )));
        }
    }
    model.store = store;
    Ok((model, meta.epoch))
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub section: String,
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    fn new(section: &str, epoch: Option<usize>, metric: &str, value: f64) -> Self {
        Self {
            section: section.into(),
            epoch,
            metric: metric.into(),
            value,
        }
    }

    fn line(&self) -> String {
        let epoch = self.epoch.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{}\n", self.section, epoch, self.metric, self.value)
    }
}

const METRICS_HEADER: &str = "section,epoch,metric,value\n";

/// Long-format rows for a training history and/or a test evaluation.
pub fn metrics_rows(history: &[EpochRecord], best_epoch: Option<usize>, eval: Option<&Evaluation>) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in history {
        rows.push(MetricRow::new("train", Some(r.epoch), "loss", r.train_loss));
        if let Some(v) = r.val_loss {
            rows.push(MetricRow::new("val", Some(r.epoch), "loss", v));
        }
        if let Some(t) = r.tau {
            rows.push(MetricRow::new("train", Some(r.epoch), "tau", t));
        }
    }
    if let Some(b) = best_epoch {
        rows.push(MetricRow::new("train", None, "best_epoch", b as f64));
    }
    if let Some(e) = eval {
        rows.push(MetricRow::new("test", None, "t_rmse", e.scores.t_rmse));
        rows.push(MetricRow::new("test", None, "t_rmse_std", e.t_rmse_std));
        rows.push(MetricRow::new("test", None, "r_rmse", e.scores.r_rmse));
        rows.push(MetricRow::new("test", None, "r_rmse_std", e.r_rmse_std));
        if let Some(d) = e.scores.drift {
            rows.push(MetricRow::new("test", None, "drift_t_rel", d.t_rel));
            rows.push(MetricRow::new("test", None, "drift_r_rel", d.r_rel));
            rows.push(MetricRow::new("test", None, "drift_segments", d.segments as f64));
        }
        rows.push(MetricRow::new("test", None, "passes", e.passes.len() as f64));
        let n = e.masks.len().max(1) as f64;
        rows.push(MetricRow::new("test", None, "selection_a", e.masks.iter().map(|m| m.rate_a).sum::<f64>() / n));
        rows.push(MetricRow::new("test", None, "selection_b", e.masks.iter().map(|m| m.rate_b).sum::<f64>() / n));
    }
    rows
}

fn metrics_text(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    for r in rows {
        s.push_str(&r.line());
    }
    s
}

fn parse_err(file: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        file: file.into(),
        msg: msg.into(),
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err("metrics.csv", format!("line {}: expected 4 fields", i + 1)));
        }
        let epoch = if f[1].is_empty() {
            None
        } else {
            Some(f[1].parse().map_err(|_| parse_err("metrics.csv", format!("line {}: bad epoch", i + 1)))?)
        };
        let value = f[3]
            .parse()
            .map_err(|_| parse_err("metrics.csv", format!("line {}: bad value", i + 1)))?;
        rows.push(MetricRow::new(f[0], epoch, f[2], value));
    }
    Ok(rows)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// `episode,frame,rate_a,rate_b,mask_a,mask_b` with the per-feature masks
/// space-separated.
pub fn masks_csv(masks: &[MaskRecord]) -> String {
    let mut s = String::from("episode,frame,rate_a,rate_b,mask_a,mask_b\n");
    for m in masks {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.episode,
            m.frame,
            m.rate_a,
            m.rate_b,
            join(&m.mask_a),
            join(&m.mask_b)
        ));
    }
    s
}

pub fn parse_masks_csv(text: &str) -> Result<Vec<MaskRecord>> {
    let bad = |i: usize| parse_err("masks.csv", format!("line {}", i + 1));
    let floats = |s: &str, i: usize| -> Result<Vec<f64>> {
        s.split_whitespace().map(|v| v.parse().map_err(|_| bad(i))).collect()
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i));
        }
        out.push(MaskRecord {
            episode: f[0].parse().map_err(|_| bad(i))?,
            frame: f[1].parse().map_err(|_| bad(i))?,
            rate_a: f[2].parse().map_err(|_| bad(i))?,
            rate_b: f[3].parse().map_err(|_| bad(i))?,
            mask_a: floats(f[4], i)?,
            mask_b: floats(f[5], i)?,
        });
    }
    Ok(out)
}

/// `episode,frame,pred_0..,gt_0..` for every scored frame.
pub fn predictions_csv(episodes: &[Episode], preds: &[EpisodePrediction], relative: bool) -> String {
    let width = if relative { 6 } else { 7 };
    let mut s = String::from("episode,frame");
    for i in 0..width {
        s.push_str(&format!(",pred_{i}"));
    }
    for i in 0..width {
        s.push_str(&format!(",gt_{i}"));
    }
    s.push('\n');
    for (ep, p) in episodes.iter().zip(preds) {
        for (k, row) in p.rows.iter().enumerate() {
            let t = k + 1;
            let gt: Vec<f64> = if relative {
                ep.gt_relative[t - 1].to_array().to_vec()
            } else {
                ep.gt_global[t].to_array().to_vec()
            };
            let cells: Vec<String> = row.iter().chain(&gt).map(|v| v.to_string()).collect();
            s.push_str(&format!("{},{},{}\n", ep.id, t, cells.join(",")));
        }
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Loads train/val data, trains, and writes the config copy, checkpoints
/// and training metrics into `out_dir`.
pub fn run_training(
    config: &ExperimentConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (_, train) = load_split(&config.data.train)?;
    let (_, val) = load_split(&config.data.val)?;
    let test_ids = if config.data.test.exists() {
        load_split(&config.data.test)?.1
    } else {
        Vec::new()
    };
    check_disjoint(&[("train", &train), ("val", &val), ("test", &test_ids)])?;
    drop(test_ids);
    let paths = RunPaths::new(out_dir);
    fs::create_dir_all(paths.checkpoints()).map_err(io_err(paths.checkpoints()))?;
    write(&paths.config(), &config.to_toml()?)?;
    let outcome = fit(config, &train, &val, progress)?;
    save_checkpoint(&paths.final_checkpoint(), &outcome.model.store, config, config.train.epochs - 1)?;
    save_checkpoint(&paths.best_checkpoint(), &outcome.best, config, outcome.best_epoch)?;
    write(
        &paths.metrics(),
        &metrics_text(&metrics_rows(&outcome.history, Some(outcome.best_epoch), None)),
    )?;
    Ok(outcome)
}

/// Evaluates a checkpoint on a dataset file and writes predictions, masks,
/// the mask report and test metrics into `out_dir`. Existing non-test rows
/// of `metrics.csv` are kept.
pub fn run_evaluation(checkpoint: &Path, dataset: &Path, out_dir: &Path) -> Result<Evaluation> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let (_, episodes) = load_split(dataset)?;
    let eval = evaluate(&model, &episodes)?;
    let paths = RunPaths::new(out_dir);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let relative = model.config.task == super::config::Task::RelativeOdometry;
    write(&paths.predictions(), &predictions_csv(&episodes, &eval.predictions, relative))?;
    write(&paths.masks(), &masks_csv(&eval.masks))?;
    write(&paths.mask_report(), &mask_report(&eval.masks, &episodes)?.to_csv())?;
    let mut rows = match fs::read_to_string(paths.metrics()) {
        Ok(text) => parse_metrics_csv(&text)?,
        Err(_) => Vec::new(),
    };
    rows.retain(|r| r.section != "test");
    rows.extend(metrics_rows(&[], None, Some(&eval)));
    write(&paths.metrics(), &metrics_text(&rows))?;
    if !paths.config().exists() {
        write(&paths.config(), &model.config.to_toml()?)?;
    }
    Ok(eval)
}
