//! Synthetic two-modality odometry episodes.
//!
//! Frame `t >= 1` carries observations of the motion from frame `t - 1` to
//! frame `t`; frame 0 observes no motion. Modality A is a fixed random linear
//! mixing of the 6-dof increment plus white noise (the "visual-like"
//! channel). Modality B is a window of `m` gyro + accelerometer samples
//! derived by finite differences of the motion plus bias and white noise
//! (the "inertial-like" channel).

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::degradation::{Degradation, DegradationSpec};
use crate::geometry::{integrate_relative, GlobalPose, RelativePose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad motion profile: {0}")]
    BadProfile(String),
    #[error("trajectory needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub const DATASET_FORMAT: &str = "selectfusion-episodes";
pub const DATASET_VERSION: u32 = 1;
pub const IMU_DIM: usize = 6;

/// Mixes a seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MotionProfile {
    /// Fixed body-frame translation per step and fixed yaw per step.
    ConstantVelocity { velocity: [f64; 3], yaw_rate: f64 },
    /// Straight stretches alternating with constant-rate turns.
    PiecewiseTurns,
    /// Mean-reverting random speed and yaw rate.
    RandomSmooth,
}

impl MotionProfile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "constant-velocity" => Ok(Self::ConstantVelocity {
                velocity: [1.0, 0.0, 0.0],
                yaw_rate: 0.0,
            }),
            "piecewise-turns" => Ok(Self::PiecewiseTurns),
            "random-smooth" => Ok(Self::RandomSmooth),
            other => Err(SimError::BadProfile(other.to_string())),
        }
    }
}

pub const MAX_STEP_TRANSLATION: f64 = 2.0;
pub const MAX_YAW_RATE: f64 = 0.5;

/// Ground-truth motion: `length - 1` relatives and `length` globals.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub relative: Vec<RelativePose>,
    pub global: Vec<GlobalPose>,
}

fn clamp_step(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if n > MAX_STEP_TRANSLATION {
        p.map(|v| v * MAX_STEP_TRANSLATION / n)
    } else {
        p
    }
}

pub fn generate_trajectory(seed: u64, length: usize, profile: &MotionProfile) -> Result<Trajectory> {
    if length < 2 {
        return Err(SimError::TooShort(length));
    }
    let steps = length - 1;
    let mut rng = rng_for(seed, 0x7261_6a65);
    let mut gauss = |s: f64| -> f64 {
        let g: f64 = StandardNormal.sample(&mut rng);
        s * g
    };
    let relative: Vec<RelativePose> = match profile {
        MotionProfile::ConstantVelocity { velocity, yaw_rate } => {
            let n = velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > MAX_STEP_TRANSLATION || yaw_rate.abs() > MAX_YAW_RATE || !n.is_finite() {
                return Err(SimError::BadProfile(format!(
                    "constant velocity {velocity:?} / yaw rate {yaw_rate} outside limits"
                )));
            }
            vec![
                RelativePose {
                    p: *velocity,
                    r: [0.0, 0.0, *yaw_rate],
                };
                steps
            ]
        }
        MotionProfile::RandomSmooth => {
            let (mut speed, mut yaw) = (1.0, 0.0);
            (0..steps)
                .map(|_| {
                    speed = (speed + 0.1 * (1.0 - speed) + gauss(0.08)).clamp(0.2, 1.8);
                    yaw = (0.85 * yaw + gauss(0.06)).clamp(-0.45, 0.45);
                    RelativePose {
                        p: clamp_step([speed, gauss(0.02), gauss(0.01)]),
                        r: [gauss(0.004), gauss(0.004), yaw],
                    }
                })
                .collect()
        }
        MotionProfile::PiecewiseTurns => {
            let mut out = Vec::with_capacity(steps);
            let mut turning = false;
            while out.len() < steps {
                let span = 8 + (gauss(1.0).abs() * 6.0) as usize;
                let speed = 0.5 + (gauss(1.0).abs() * 0.5).min(1.0);
                let rate = if turning {
                    let mag = 0.1 + (gauss(1.0).abs() * 0.15).min(0.3);
                    if gauss(1.0) < 0.0 {
                        -mag
                    } else {
                        mag
                    }
                } else {
                    0.0
                };
                for _ in 0..span.min(steps - out.len()) {
                    out.push(RelativePose {
                        p: clamp_step([speed, gauss(0.01), gauss(0.005)]),
                        r: [gauss(0.002), gauss(0.002), (rate + gauss(0.005)).clamp(-0.45, 0.45)],
                    });
                }
                turning = !turning;
            }
            out
        }
    };
    let global = integrate_relative(&relative, &GlobalPose::identity());
    Ok(Trajectory { relative, global })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// White noise on modality A.
    pub sigma_a: f64,
    /// Per-sample white noise on gyro channels, rad/s.
    pub sigma_gyro: f64,
    /// Per-sample white noise on accelerometer channels, m/s^2.
    pub sigma_accel: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_a: 0.05,
            sigma_gyro: 0.05,
            sigma_accel: 0.1,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma_a: 0.0,
            sigma_gyro: 0.0,
            sigma_accel: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Frames per episode.
    pub frames: usize,
    /// Modality A dimension.
    pub obs_dim: usize,
    /// Inertial samples per frame interval.
    pub window: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
    pub profile: MotionProfile,
    pub noise: NoiseConfig,
    /// Seed of the modality A mixing matrix, shared by every episode.
    pub mixing_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            obs_dim: 32,
            window: 10,
            frame_dt: 0.1,
            profile: MotionProfile::RandomSmooth,
            noise: NoiseConfig::default(),
            mixing_seed: 0,
        }
    }
}

/// The `obs_dim x 6` matrix mapping a motion increment to modality A.
pub fn mixing_matrix(cfg: &SimConfig) -> Vec<[f64; 6]> {
    let mut rng = rng_for(cfg.mixing_seed, 0x6d69_7869);
    let scale = 1.0 / (6f64).sqrt();
    (0..cfg.obs_dim)
        .map(|_| {
            let mut row = [0.0; 6];
            for v in &mut row {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g * scale;
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub modality_a: Vec<f64>,
    /// `m` samples of `(gx, gy, gz, ax, ay, az)`.
    pub modality_b: Vec<Vec<f64>>,
    pub valid_a: bool,
    pub valid_b: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degradations: Vec<Degradation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub frames: Vec<SensorFrame>,
    pub gt_relative: Vec<RelativePose>,
    pub gt_global: Vec<GlobalPose>,
    /// Episode-wide corruptions (also mirrored on every frame).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degradations: Vec<Degradation>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Largest deviation between the stored globals and the integrated
    /// relatives.
    pub fn consistency_error(&self) -> f64 {
        let integrated = integrate_relative(&self.gt_relative, &self.gt_global[0]);
        integrated
            .iter()
            .zip(&self.gt_global)
            .map(|(a, b)| {
                let dp = (0..3).map(|i| (a.p[i] - b.p[i]).abs()).fold(0.0, f64::max);
                // q and -q are the same rotation
                let same: f64 = (0..4).map(|i| (a.q[i] - b.q[i]).abs()).fold(0.0, f64::max);
                let flip: f64 = (0..4).map(|i| (a.q[i] + b.q[i]).abs()).fold(0.0, f64::max);
                dp.max(same.min(flip))
            })
            .fold(0.0, f64::max)
    }
}

/// Body-frame angular rate and acceleration of each interval, by finite
/// differences.
pub fn interval_rates(relative: &[RelativePose], dt: f64) -> Vec<[f64; 6]> {
    relative
        .iter()
        .enumerate()
        .map(|(t, rel)| {
            let prev = if t == 0 { rel } else { &relative[t - 1] };
            let mut s = [0.0; 6];
            for i in 0..3 {
                s[i] = rel.r[i] / dt;
                s[3 + i] = (rel.p[i] - prev.p[i]) / (dt * dt);
            }
            s
        })
        .collect()
}

/// Noise-free inertial windows, one per frame. Samples move linearly from
/// the previous interval's rates to the current ones; frame 0 is at rest.
pub fn analytic_windows(relative: &[RelativePose], dt: f64, m: usize) -> Vec<Vec<[f64; 6]>> {
    let rates = interval_rates(relative, dt);
    let mut out = vec![vec![[0.0; 6]; m]];
    for t in 0..rates.len() {
        let from = if t == 0 { rates[0] } else { rates[t - 1] };
        let to = rates[t];
        out.push(
            (0..m)
                .map(|j| {
                    let w = (j + 1) as f64 / m as f64;
                    let mut s = [0.0; 6];
                    for i in 0..6 {
                        s[i] = from[i] + (to[i] - from[i]) * w;
                    }
                    s
                })
                .collect(),
        );
    }
    out
}

pub fn render_observations(traj: &Trajectory, id: u64, seed: u64, cfg: &SimConfig) -> Episode {
    let mix = mixing_matrix(cfg);
    let mut rng = rng_for(seed, 0x6f62_7376);
    let noise = cfg.noise;
    let windows = analytic_windows(&traj.relative, cfg.frame_dt, cfg.window);
    let mut white = |sigma: f64| -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sigma).expect("sigma").sample(&mut rng)
        }
    };
    let frames = (0..traj.global.len())
        .map(|t| {
            let motion = if t == 0 { [0.0; 6] } else { traj.relative[t - 1].to_array() };
            let modality_a = mix
                .iter()
                .map(|row| row.iter().zip(&motion).map(|(m, x)| m * x).sum::<f64>() + white(noise.sigma_a))
                .collect();
            let modality_b = windows[t]
                .iter()
                .map(|rate| {
                    let mut s = Vec::with_capacity(IMU_DIM);
                    for i in 0..3 {
                        s.push(rate[i] + noise.gyro_bias[i] + white(noise.sigma_gyro));
                    }
                    for i in 0..3 {
                        s.push(rate[3 + i] + noise.accel_bias[i] + white(noise.sigma_accel));
                    }
                    s
                })
                .collect();
            SensorFrame {
                modality_a,
                modality_b,
                valid_a: true,
                valid_b: true,
                degradations: Vec::new(),
            }
        })
        .collect();
    Episode {
        id,
        seed,
        frames,
        gt_relative: traj.relative.clone(),
        gt_global: traj.global.clone(),
        degradations: Vec::new(),
    }
}

pub fn generate_episode(id: u64, seed: u64, cfg: &SimConfig) -> Result<Episode> {
    let traj = generate_trajectory(seed, cfg.frames, &cfg.profile)?;
    Ok(render_observations(&traj, id, seed, cfg))
}

// ── datasets ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub sim: SimConfig,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train_episodes: 64,
            val_episodes: 16,
            test_episodes: 16,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_episodes,
            Split::Val => self.val_episodes,
            Split::Test => self.test_episodes,
        }
    }

    /// First episode id of a split; ids are contiguous and disjoint.
    pub fn first_id(&self, split: Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Val => self.train_episodes as u64,
            Split::Test => (self.train_episodes + self.val_episodes) as u64,
        }
    }

    pub fn digest(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<Episode>> {
    let first = cfg.first_id(split);
    (0..cfg.count(split) as u64)
        .map(|i| {
            let id = first + i;
            generate_episode(id, derive_seed(cfg.seed, 0x1000 + id), &cfg.sim)
        })
        .collect()
}

/// First line of every episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub split: Split,
    pub config: DatasetConfig,
    /// Degradation settings applied after generation, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationSpec>,
}

impl DatasetHeader {
    pub fn new(split: Split, config: DatasetConfig) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            split,
            config,
            degradation: None,
        }
    }
}

pub fn write_episodes(w: &mut impl Write, header: &DatasetHeader, episodes: &[Episode]) -> Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for ep in episodes {
        serde_json::to_writer(&mut *w, ep)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes(r: impl BufRead) -> Result<(DatasetHeader, Vec<Episode>)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| SimError::InvalidDataset("empty file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(SimError::InvalidDataset(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut episodes = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        episodes.push(serde_json::from_str(&line)?);
    }
    Ok((header, episodes))
}
