use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::fusion::TemperatureSchedule;
use crate::geometry::LossConfig;
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    RelativeOdometry,
    GlobalRelocalization,
}

impl Task {
    pub fn output_dim(self) -> usize {
        match self {
            Task::RelativeOdometry => 6,
            Task::GlobalRelocalization => 7,
        }
    }
}

/// Fusion strategy, including the two single-modality baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionChoice {
    NoneA,
    NoneB,
    Direct,
    Soft,
    Hard,
}

impl FusionChoice {
    pub const ALL: [FusionChoice; 5] = [
        FusionChoice::NoneA,
        FusionChoice::NoneB,
        FusionChoice::Direct,
        FusionChoice::Soft,
        FusionChoice::Hard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionChoice::NoneA => "none-a",
            FusionChoice::NoneB => "none-b",
            FusionChoice::Direct => "direct",
            FusionChoice::Soft => "soft",
            FusionChoice::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn uses_a(self) -> bool {
        self != FusionChoice::NoneB
    }

    pub fn uses_b(self) -> bool {
        self != FusionChoice::NoneA
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width of each modality encoder.
    pub d: usize,
    /// Modality A input width.
    pub obs_dim: usize,
    /// Hidden widths of the modality A feed-forward encoder.
    pub encoder_a_hidden: Vec<usize>,
    /// Hidden size of each direction of the modality B recurrent encoder.
    pub encoder_b_hidden: usize,
    pub temporal_hidden: usize,
    /// One logit layer for both masks (true) or one per modality.
    pub shared_logits: bool,
    /// Multiplier applied to inertial samples before encoding.
    pub imu_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            obs_dim: 32,
            encoder_a_hidden: vec![64, 64],
            encoder_b_hidden: 32,
            temporal_hidden: 64,
            shared_logits: true,
            imu_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Frames per truncated-backpropagation segment.
    pub tbptt: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Mask samples drawn per test pass of a hard-fusion model.
    pub eval_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            epochs: 50,
            tbptt: 20,
            tau_start: 1.0,
            tau_end: 0.5,
            eval_seeds: 5,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Annealing runs over the training epochs so the last epoch trains at
    /// `tau_end`.
    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            total_epochs: self.epochs.saturating_sub(1).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.jsonl"),
            val: PathBuf::from("data/val.jsonl"),
            test: PathBuf::from("data/test.jsonl"),
        }
    }
}

impl DataPaths {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            test: dir.join("test.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub task: Task,
    pub fusion: FusionChoice,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::RelativeOdometry,
            fusion: FusionChoice::Hard,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        if m.d == 0 {
            return Err(invalid("model.d", "must be at least 1"));
        }
        if m.obs_dim == 0 {
            return Err(invalid("model.obs_dim", "must be at least 1"));
        }
        if m.encoder_a_hidden.iter().any(|&h| h == 0) {
            return Err(invalid("model.encoder_a_hidden", "widths must be at least 1"));
        }
        if m.encoder_b_hidden == 0 {
            return Err(invalid("model.encoder_b_hidden", "must be at least 1"));
        }
        if m.temporal_hidden == 0 {
            return Err(invalid("model.temporal_hidden", "must be at least 1"));
        }
        if !(m.imu_scale.is_finite() && m.imu_scale > 0.0) {
            return Err(invalid("model.imu_scale", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if t.tbptt == 0 {
            return Err(invalid("train.tbptt", "must be at least 1"));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(invalid("train.lr", "must be finite and non-negative"));
        }
        if !(t.tau_end > 0.0 && t.tau_start >= t.tau_end) {
            return Err(invalid("train.tau_start", "need tau_start >= tau_end > 0"));
        }
        if t.eval_seeds == 0 {
            return Err(invalid("train.eval_seeds", "must be at least 1"));
        }
        if !(self.loss.lambda_global >= 0.0 && self.loss.lambda_relative >= 0.0) {
            return Err(invalid("loss", "weights must be non-negative"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
