//! Experiment orchestration: model assembly, training, evaluation,
//! checkpoints and mask statistics.

mod config;
mod eval;
mod masks;
mod model;
mod run;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{DataPaths, ExperimentConfig, FusionChoice, ModelConfig, Task, TrainConfig};
pub use eval::{evaluate, normalized_global, predicted_globals, score, EpisodePrediction, Evaluation, MaskRecord, Scores};
pub use masks::{degradation_bucket, mask_report, speed_bucket, turn_bucket, MaskReport, ReportRow, SPEED_EDGES, TURN_EDGES};
pub use model::{frame_batch, FrameBatch, Model, StepOutput};
pub use run::{
    check_disjoint, load_checkpoint, load_split, masks_csv, metrics_rows, parse_masks_csv, parse_metrics_csv,
    predictions_csv, run_evaluation, run_training, save_checkpoint, MetricRow, RunPaths,
};
pub use train::{batches, fit, fit_from, infer, mean_loss, EpochRecord, FrameVisit, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("dataset file not found: {0}")]
    DatasetMissing(PathBuf),
    #[error("bad dataset: {0}")]
    DatasetShape(String),
    #[error("episode {id} appears in both the {first} and {second} splits")]
    SplitOverlap {
        id: u64,
        first: String,
        second: String,
    },
    #[error("loss diverged in epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("checkpoint does not fit the model: {0}")]
    DimensionMismatch(String),
    #[error("mask log entry (episode {episode}, frame {frame}) has no matching test frame")]
    JoinMismatch { episode: u64, frame: usize },
    #[error("malformed {file}: {msg}")]
    Parse { file: String, msg: String },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
    #[error("config: {0}")]
    TomlRead(#[from] toml::de::Error),
    #[error("config: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
