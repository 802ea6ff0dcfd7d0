//! Command-line front end: `simulate`, `degrade`, `train`, `eval`, `report`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::degradation::{apply_all, DegradationSpec};
use crate::harness::{
    load_checkpoint, run_evaluation, run_training, DataPaths, ExperimentConfig, FusionChoice, HarnessError, Task,
};
use crate::report::generate_report;
use crate::simulator::{
    generate_split, hex_digest, write_episodes, DatasetConfig, DatasetHeader, MotionProfile, SimConfig, Split,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping worker threads (default 1).
pub const THREADS_VAR: &str = "SELECTFUSION_THREADS";

#[derive(Debug, Parser)]
#[command(name = "selectfusion", version, about = "Selective sensor fusion lab on synthetic odometry data")]
pub struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with the command's settings (dataset, degradation or experiment config).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test episode files and a manifest.
    Simulate(SimulateArgs),
    /// Corrupt existing episode files.
    Degrade(DegradeArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Plots and summary tables from run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Training episodes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub episodes: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub val_episodes: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub test_episodes: Option<u64>,
    /// Frames per episode.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub frames: Option<u64>,
    /// constant-velocity, piecewise-turns or random-smooth.
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Directory holding train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    pub input: PathBuf,
    /// Preset: clean, all-5pct, vision-10pct, imu-10pct, frame-drop-30pct.
    #[arg(long, conflicts_with = "config")]
    pub spec: Option<String>,
    /// Splits to corrupt; the others are copied unchanged.
    #[arg(long, value_delimiter = ',', default_values_t = ["train".to_string(), "val".to_string(), "test".to_string()])]
    pub splits: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (overrides the config's data paths).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fusion: Option<String>,
    /// relative-odometry or global-relocalization.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required = true)]
    pub checkpoint: Option<PathBuf>,
    /// Episode file to score (defaults to the checkpoint config's test split).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to summarize.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
    #[error(transparent)]
    Degradation(#[from] crate::degradation::DegradationError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-split entry of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub split: Split,
    pub file: String,
    pub episodes: usize,
    pub ids: Vec<u64>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationSpec>,
    pub splits: Vec<ManifestSplit>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_threads();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn init_threads() {
    let n = std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // a second initialization in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let say = |msg: &str| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a, &say),
        Command::Degrade(a) => degrade(cli, a, &say),
        Command::Train(a) => train(cli, a, &say),
        Command::Eval(a) => eval(cli, a, &say),
        Command::Report(a) => report(cli, a, &say),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_split(path: &Path, header: &DatasetHeader, episodes: &[crate::simulator::Episode]) -> Result<String, CliError> {
    let mut buf = Vec::new();
    write_episodes(&mut buf, header, episodes)?;
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    w.write_all(&buf).map_err(io(path))?;
    w.flush().map_err(io(path))?;
    Ok(hex_digest(&buf))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io(&path))
}

fn simulate(cli: &Cli, a: &SimulateArgs, say: &dyn Fn(&str)) -> Result<(), CliError> {
    let mut cfg: DatasetConfig = match &cli.config {
        Some(p) => read_toml(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.episodes {
        cfg.train_episodes = n as usize;
    }
    if let Some(n) = a.val_episodes {
        cfg.val_episodes = n as usize;
    }
    if let Some(n) = a.test_episodes {
        cfg.test_episodes = n as usize;
    }
    if let Some(n) = a.frames {
        cfg.sim.frames = n as usize;
    }
    if let Some(p) = &a.profile {
        cfg.sim.profile = MotionProfile::parse(p).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if cfg.train_episodes == 0 || cfg.val_episodes == 0 || cfg.test_episodes == 0 {
        return Err(CliError::Usage("every split needs at least one episode".into()));
    }
    validate_sim(&cfg.sim)?;
    fs::create_dir_all(&cli.out_dir).map_err(io(&cli.out_dir))?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let episodes = generate_split(&cfg, split)?;
        let path = cli.out_dir.join(split.file_name());
        let sha = write_split(&path, &DatasetHeader::new(split, cfg.clone()), &episodes)?;
        say(&format!("wrote {} ({} episodes)", path.display(), episodes.len()));
        splits.push(ManifestSplit {
            split,
            file: split.file_name(),
            episodes: episodes.len(),
            ids: episodes.iter().map(|e| e.id).collect(),
            sha256: sha,
        });
    }
    write_manifest(
        &cli.out_dir,
        &Manifest {
            seed: cfg.seed,
            config_digest: cfg.digest(),
            degradation: None,
            splits,
        },
    )
}

fn validate_sim(sim: &SimConfig) -> Result<(), CliError> {
    if sim.frames < 2 || sim.obs_dim == 0 || sim.window == 0 || !(sim.frame_dt > 0.0) {
        return Err(CliError::Usage(
            "simulation needs frames >= 2, obs_dim >= 1, window >= 1 and frame_dt > 0".into(),
        ));
    }
    Ok(())
}

fn degrade(cli: &Cli, a: &DegradeArgs, say: &dyn Fn(&str)) -> Result<(), CliError> {
    let mut spec = match (&a.spec, &cli.config) {
        (Some(name), _) => DegradationSpec::preset(name, 0).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, Some(p)) => read_toml(p)?,
        (None, None) => return Err(CliError::Usage("degrade needs --spec or --config".into())),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let chosen: Vec<Split> = a
        .splits
        .iter()
        .map(|s| {
            Split::ALL
                .into_iter()
                .find(|sp| sp.name() == s)
                .ok_or_else(|| CliError::Usage(format!("unknown split `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(&cli.out_dir).map_err(io(&cli.out_dir))?;
    let mut splits = Vec::new();
    let mut seed = 0;
    let mut digest = String::new();
    for split in Split::ALL {
        let input = a.input.join(split.file_name());
        let (mut header, episodes) = crate::harness::load_split(&input)?;
        seed = header.config.seed;
        digest = header.config.digest();
        let episodes = if chosen.contains(&split) {
            header.degradation = Some(spec.clone());
            apply_all(&episodes, &spec)?
        } else {
            episodes
        };
        let path = cli.out_dir.join(split.file_name());
        let sha = write_split(&path, &header, &episodes)?;
        say(&format!("wrote {}", path.display()));
        splits.push(ManifestSplit {
            split,
            file: split.file_name(),
            episodes: episodes.len(),
            ids: episodes.iter().map(|e| e.id).collect(),
            sha256: sha,
        });
    }
    write_manifest(
        &cli.out_dir,
        &Manifest {
            seed,
            config_digest: digest,
            degradation: Some(spec),
            splits,
        },
    )
}

fn train(cli: &Cli, a: &TrainArgs, say: &dyn Fn(&str)) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            ExperimentConfig::from_toml(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.data {
        cfg.data = DataPaths::in_dir(d);
    }
    if let Some(f) = &a.fusion {
        cfg.fusion = FusionChoice::parse(f).ok_or_else(|| CliError::Usage(format!("unknown fusion `{f}`")))?;
    }
    if let Some(t) = &a.task {
        cfg.task = match t.as_str() {
            "relative-odometry" => Task::RelativeOdometry,
            "global-relocalization" => Task::GlobalRelocalization,
            other => return Err(CliError::Usage(format!("unknown task `{other}`"))),
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e as usize;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b as usize;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = run_training(&cfg, &cli.out_dir, &mut |r| {
        let val = r.val_loss.map(|v| format!(" val {v:.6}")).unwrap_or_default();
        say(&format!("epoch {:>3} train {:.6}{val}", r.epoch, r.train_loss));
    })?;
    say(&format!(
        "best epoch {}; checkpoints in {}",
        outcome.best_epoch,
        cli.out_dir.join("checkpoints").display()
    ));
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs, say: &dyn Fn(&str)) -> Result<(), CliError> {
    let checkpoint = a.checkpoint.as_ref().expect("required by clap");
    let data = match &a.data {
        Some(d) if d.is_dir() => d.join(Split::Test.file_name()),
        Some(d) => d.clone(),
        None => load_checkpoint(checkpoint)?.0.config.data.test,
    };
    let eval = if let Some(seed) = cli.seed {
        // re-seed the evaluation streams through a temporary checkpoint copy
        let (mut model, epoch) = load_checkpoint(checkpoint)?;
        model.config.seed = seed;
        fs::create_dir_all(&cli.out_dir).map_err(io(&cli.out_dir))?;
        let tmp = cli.out_dir.join(".eval.ckpt");
        crate::harness::save_checkpoint(&tmp, &model.store, &model.config, epoch)?;
        let r = run_evaluation(&tmp, &data, &cli.out_dir);
        let _ = fs::remove_file(&tmp);
        r?
    } else {
        run_evaluation(checkpoint, &data, &cli.out_dir)?
    };
    let drift = eval
        .scores
        .drift
        .map(|d| format!(", drift {:.3}% / {:.3} deg/100m", d.t_rel, d.r_rel))
        .unwrap_or_default();
    say(&format!(
        "t_rmse {:.6} m (std {:.6}), r_rmse {:.6} deg (std {:.6}){drift}",
        eval.scores.t_rmse, eval.t_rmse_std, eval.scores.r_rmse, eval.r_rmse_std
    ));
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs, say: &dyn Fn(&str)) -> Result<(), CliError> {
    let out = generate_report(&a.runs, &cli.out_dir)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    say(&format!("wrote {} files to {}", out.files.len(), cli.out_dir.display()));
    Ok(())
}
