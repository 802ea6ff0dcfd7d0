//! Sensor corruptions applied to generated episodes.
//!
//! Vision-side operators act on `modality_a`, inertial-side operators on
//! `modality_b`. Ground truth is never touched. Each applied corruption is
//! recorded on the affected frames so mask statistics can be joined against
//! it later.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::{rng_for, Episode, SensorFrame};

#[derive(Debug, Error, PartialEq)]
pub enum DegradationError {
    #[error("misalignment of {0} degrees outside [0, 10]")]
    MaxDegOutOfRange(f64),
    #[error("time shift {shift} exceeds the maximum of {max} samples")]
    ShiftTooLarge { shift: i64, max: usize },
    #[error("probability {field} = {value} outside [0, 1]")]
    BadProbability { field: &'static str, value: f64 },
    #[error("invalid parameter {field} = {value}")]
    BadParameter { field: &'static str, value: f64 },
    #[error("unknown preset '{0}' (expected clean, all-5pct, vision-10pct, imu-10pct or frame-drop-30pct)")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, DegradationError>;

pub const MAX_MISALIGN_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationKind {
    Occlusion,
    BlurNoise,
    Missing,
    ImuNoiseBias,
    ImuMissing,
    SpatialMisalign,
    TemporalMisalign,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 7] = [
        DegradationKind::Occlusion,
        DegradationKind::BlurNoise,
        DegradationKind::Missing,
        DegradationKind::ImuNoiseBias,
        DegradationKind::ImuMissing,
        DegradationKind::SpatialMisalign,
        DegradationKind::TemporalMisalign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Occlusion => "occlusion",
            DegradationKind::BlurNoise => "blur-noise",
            DegradationKind::Missing => "missing",
            DegradationKind::ImuNoiseBias => "imu-noise-bias",
            DegradationKind::ImuMissing => "imu-missing",
            DegradationKind::SpatialMisalign => "spatial-misalign",
            DegradationKind::TemporalMisalign => "temporal-misalign",
        }
    }
}

/// One applied corruption with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Degradation {
    Occlusion { start: usize, len: usize },
    BlurNoise { width: usize, rate: f64, corrupted: usize },
    Missing,
    ImuNoiseBias { sigma: f64, bias: [f64; 3] },
    ImuMissing,
    SpatialMisalign { axis: [f64; 3], angle_deg: f64 },
    TemporalMisalign { shift: i64 },
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Degradation::Occlusion { .. } => DegradationKind::Occlusion,
            Degradation::BlurNoise { .. } => DegradationKind::BlurNoise,
            Degradation::Missing => DegradationKind::Missing,
            Degradation::ImuNoiseBias { .. } => DegradationKind::ImuNoiseBias,
            Degradation::ImuMissing => DegradationKind::ImuMissing,
            Degradation::SpatialMisalign { .. } => DegradationKind::SpatialMisalign,
            Degradation::TemporalMisalign { .. } => DegradationKind::TemporalMisalign,
        }
    }
}

/// Chance of each corruption. Frame-level kinds are drawn per frame,
/// misalignments once per episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Probabilities {
    pub occlusion: f64,
    pub blur_noise: f64,
    pub missing: f64,
    pub imu_noise_bias: f64,
    pub imu_missing: f64,
    pub spatial_misalign: f64,
    pub temporal_misalign: f64,
}

impl Probabilities {
    pub fn uniform(p: f64) -> Self {
        Self {
            occlusion: p,
            blur_noise: p,
            missing: p,
            imu_noise_bias: p,
            imu_missing: p,
            spatial_misalign: p,
            temporal_misalign: p,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("occlusion", self.occlusion),
            ("blur_noise", self.blur_noise),
            ("missing", self.missing),
            ("imu_noise_bias", self.imu_noise_bias),
            ("imu_missing", self.imu_missing),
            ("spatial_misalign", self.spatial_misalign),
            ("temporal_misalign", self.temporal_misalign),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub probabilities: Probabilities,
    pub occlusion_fraction: f64,
    pub blur_kernel_width: usize,
    pub saltpepper_rate: f64,
    pub accel_noise_sigma: f64,
    pub gyro_bias: [f64; 3],
    pub misalign_max_deg: f64,
    pub time_shift_max: usize,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            probabilities: Probabilities::default(),
            occlusion_fraction: 0.25,
            blur_kernel_width: 5,
            saltpepper_rate: 0.05,
            accel_noise_sigma: 0.5,
            gyro_bias: [0.2, 0.2, 0.2],
            misalign_max_deg: 10.0,
            time_shift_max: 3,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub const PRESETS: [&'static str; 5] = ["clean", "all-5pct", "vision-10pct", "imu-10pct", "frame-drop-30pct"];

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let probabilities = match name {
            "clean" => Probabilities::default(),
            "all-5pct" => Probabilities::uniform(0.05),
            "vision-10pct" => Probabilities {
                occlusion: 0.1,
                blur_noise: 0.1,
                missing: 0.1,
                ..Default::default()
            },
            "imu-10pct" => Probabilities {
                imu_noise_bias: 0.1,
                imu_missing: 0.1,
                spatial_misalign: 0.1,
                temporal_misalign: 0.1,
                ..Default::default()
            },
            "frame-drop-30pct" => Probabilities {
                missing: 0.3,
                ..Default::default()
            },
            other => return Err(DegradationError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            probabilities,
            seed,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in self.probabilities.fields() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DegradationError::BadProbability { field, value });
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(DegradationError::BadParameter {
                field: "occlusion_fraction",
                value: self.occlusion_fraction,
            });
        }
        if !(0.0..=1.0).contains(&self.saltpepper_rate) {
            return Err(DegradationError::BadParameter {
                field: "saltpepper_rate",
                value: self.saltpepper_rate,
            });
        }
        if self.blur_kernel_width == 0 {
            return Err(DegradationError::BadParameter {
                field: "blur_kernel_width",
                value: 0.0,
            });
        }
        if !(self.accel_noise_sigma >= 0.0) {
            return Err(DegradationError::BadParameter {
                field: "accel_noise_sigma",
                value: self.accel_noise_sigma,
            });
        }
        check_max_deg(self.misalign_max_deg)
    }
}

fn check_max_deg(max_deg: f64) -> Result<()> {
    if (0.0..=MAX_MISALIGN_DEG).contains(&max_deg) {
        Ok(())
    } else {
        Err(DegradationError::MaxDegOutOfRange(max_deg))
    }
}

fn record(frame: &mut SensorFrame, d: Degradation) {
    frame.degradations.push(d);
}

/// Zeroes a random contiguous run of `ceil(fraction * D_A)` entries.
pub fn occlude(frame: &mut SensorFrame, fraction: f64, rng: &mut impl Rng) {
    let dim = frame.modality_a.len();
    let len = ((fraction * dim as f64).ceil() as usize).min(dim);
    if len == 0 {
        return;
    }
    let start = rng.gen_range(0..=dim - len);
    frame.modality_a[start..start + len].iter_mut().for_each(|v| *v = 0.0);
    record(frame, Degradation::Occlusion { start, len });
}

/// Centered moving average; windows are truncated at the ends and
/// renormalized over the entries they cover.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let left = (width - 1) / 2;
    let right = width - 1 - left;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(x.len() - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Smooths `modality_a`, then replaces a `rate` share of entries with
/// `±max|modality_a|`.
pub fn blur_noise(frame: &mut SensorFrame, width: usize, rate: f64, rng: &mut impl Rng) {
    let peak = frame.modality_a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = if width > 1 {
        moving_average(&frame.modality_a, width)
    } else {
        frame.modality_a.clone()
    };
    let mut corrupted = 0;
    if rate > 0.0 {
        for v in &mut out {
            if rng.gen_bool(rate) {
                *v = if rng.gen_bool(0.5) { peak } else { -peak };
                corrupted += 1;
            }
        }
    }
    frame.modality_a = out;
    record(frame, Degradation::BlurNoise { width, rate, corrupted });
}

pub fn drop_frame(frame: &mut SensorFrame) {
    frame.modality_a.iter_mut().for_each(|v| *v = 0.0);
    frame.valid_a = false;
    record(frame, Degradation::Missing);
}

/// Zero-fills each frame's `modality_a` with probability `p`.
pub fn drop_frames(episode: &mut Episode, p: f64, rng: &mut impl Rng) {
    for frame in &mut episode.frames {
        if rng.gen_bool(p) {
            drop_frame(frame);
        }
    }
}

/// White noise on accelerometer channels, a fixed offset on gyro channels.
pub fn imu_noise_bias(frame: &mut SensorFrame, sigma: f64, bias: [f64; 3], rng: &mut impl Rng) {
    let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    for sample in &mut frame.modality_b {
        for i in 0..3 {
            sample[i] += bias[i];
        }
        if let Some(n) = &normal {
            for v in &mut sample[3..6] {
                *v += n.sample(rng);
            }
        }
    }
    record(frame, Degradation::ImuNoiseBias { sigma, bias });
}

pub fn drop_window(frame: &mut SensorFrame) {
    frame
        .modality_b
        .iter_mut()
        .for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
    frame.valid_b = false;
    record(frame, Degradation::ImuMissing);
}

/// Zero-fills each frame's inertial window with probability `p`.
pub fn imu_drop(episode: &mut Episode, p: f64, rng: &mut impl Rng) {
    for frame in &mut episode.frames {
        if rng.gen_bool(p) {
            drop_window(frame);
        }
    }
}

/// Rotates every gyro and accel sample vector of the episode.
pub fn rotate_inertial(episode: &mut Episode, rotation: &Rotation3<f64>) {
    for frame in &mut episode.frames {
        for s in &mut frame.modality_b {
            let g = rotation * Vector3::new(s[0], s[1], s[2]);
            let a = rotation * Vector3::new(s[3], s[4], s[5]);
            s[..3].copy_from_slice(g.as_slice());
            s[3..].copy_from_slice(a.as_slice());
        }
    }
}

/// One rotation about a uniform random axis by a uniform angle in
/// `[0, max_deg]`, applied to the whole episode.
pub fn spatial_misalign(episode: &mut Episode, max_deg: f64, rng: &mut impl Rng) -> Result<()> {
    check_max_deg(max_deg)?;
    let axis = loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        if v.norm() > 1e-9 {
            break Unit::new_normalize(v);
        }
    };
    let angle_deg = if max_deg > 0.0 { rng.gen_range(0.0..=max_deg) } else { 0.0 };
    rotate_inertial(episode, &Rotation3::from_axis_angle(&axis, angle_deg.to_radians()));
    let d = Degradation::SpatialMisalign {
        axis: [axis.x, axis.y, axis.z],
        angle_deg,
    };
    mark_all(episode, d);
    Ok(())
}

/// Shifts the flattened inertial stream by `k` samples against the frame
/// boundaries: sample `i` moves to `i + k`, vacated samples become zero.
pub fn shift_inertial(episode: &mut Episode, k: i64) {
    let m = episode.frames.first().map_or(0, |f| f.modality_b.len());
    let stream: Vec<Vec<f64>> = episode
        .frames
        .iter()
        .flat_map(|f| f.modality_b.iter().cloned())
        .collect();
    let n = stream.len() as i64;
    let width = stream.first().map_or(0, Vec::len);
    for (t, frame) in episode.frames.iter_mut().enumerate() {
        for j in 0..m {
            let src = (t * m + j) as i64 - k;
            frame.modality_b[j] = if (0..n).contains(&src) {
                stream[src as usize].clone()
            } else {
                vec![0.0; width]
            };
        }
    }
}

pub fn temporal_misalign(episode: &mut Episode, k: i64, max_shift: usize) -> Result<()> {
    if k.unsigned_abs() as usize > max_shift {
        return Err(DegradationError::ShiftTooLarge { shift: k, max: max_shift });
    }
    shift_inertial(episode, k);
    mark_all(episode, Degradation::TemporalMisalign { shift: k });
    Ok(())
}

fn mark_all(episode: &mut Episode, d: Degradation) {
    for frame in &mut episode.frames {
        frame.degradations.push(d.clone());
    }
    episode.degradations.push(d);
}

/// Applies `spec` to one episode. The random stream depends only on the
/// spec seed and the episode id.
pub fn apply(episode: &Episode, spec: &DegradationSpec) -> Result<Episode> {
    spec.validate()?;
    let mut ep = episode.clone();
    let mut rng = rng_for(spec.seed, 0xde67_0000 ^ episode.id);
    let p = &spec.probabilities;
    // quasi-static calibration and timing faults first
    if p.spatial_misalign > 0.0 && rng.gen_bool(p.spatial_misalign) {
        spatial_misalign(&mut ep, spec.misalign_max_deg, &mut rng)?;
    }
    if p.temporal_misalign > 0.0 && spec.time_shift_max > 0 && rng.gen_bool(p.temporal_misalign) {
        let max = spec.time_shift_max as i64;
        let mut k = rng.gen_range(1..=max);
        if rng.gen_bool(0.5) {
            k = -k;
        }
        temporal_misalign(&mut ep, k, spec.time_shift_max)?;
    }
    for frame in &mut ep.frames {
        if p.imu_noise_bias > 0.0 && rng.gen_bool(p.imu_noise_bias) {
            imu_noise_bias(frame, spec.accel_noise_sigma, spec.gyro_bias, &mut rng);
        }
        if p.imu_missing > 0.0 && rng.gen_bool(p.imu_missing) {
            drop_window(frame);
        }
        if p.occlusion > 0.0 && rng.gen_bool(p.occlusion) {
            occlude(frame, spec.occlusion_fraction, &mut rng);
        }
        if p.blur_noise > 0.0 && rng.gen_bool(p.blur_noise) {
            blur_noise(frame, spec.blur_kernel_width, spec.saltpepper_rate, &mut rng);
        }
        if p.missing > 0.0 && rng.gen_bool(p.missing) {
            drop_frame(frame);
        }
    }
    Ok(ep)
}

pub fn apply_all(episodes: &[Episode], spec: &DegradationSpec) -> Result<Vec<Episode>> {
    episodes.iter().map(|e| apply(e, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_episode, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(a: Vec<f64>) -> SensorFrame {
        SensorFrame {
            modality_a: a,
            modality_b: vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; 4],
            valid_a: true,
            valid_b: true,
            degradations: vec![],
        }
    }

    fn episode() -> Episode {
        let cfg = SimConfig {
            frames: 20,
            ..Default::default()
        };
        generate_episode(7, 7, &cfg).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn occlusion_window() {
        let base: Vec<f64> = (1..=32).map(f64::from).collect();
        let mut f = frame(base.clone());
        occlude(&mut f, 0.0, &mut rng());
        assert_eq!(f.modality_a, base);
        assert!(f.degradations.is_empty());

        let mut f = frame(base.clone());
        occlude(&mut f, 1.0, &mut rng());
        assert!(f.modality_a.iter().all(|&v| v == 0.0));

        let mut f = frame(base.clone());
        occlude(&mut f, 0.25, &mut rng());
        let Degradation::Occlusion { start, len } = f.degradations[0] else {
            panic!()
        };
        assert_eq!(len, 8);
        for (i, (&v, &b)) in f.modality_a.iter().zip(&base).enumerate() {
            if (start..start + 8).contains(&i) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, b);
            }
        }
    }

    #[test]
    fn blur_cases() {
        let base: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let mut f = frame(base.clone());
        blur_noise(&mut f, 1, 0.0, &mut rng());
        assert_eq!(f.modality_a, base);

        let mut f = frame(vec![2.5; 9]);
        blur_noise(&mut f, 5, 0.0, &mut rng());
        assert!(f.modality_a.iter().all(|v| (v - 2.5).abs() < 1e-15));

        let out = moving_average(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0], 3);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn salt_and_pepper_uses_peak_magnitude() {
        let mut f = frame(vec![0.5, -2.0, 1.0, 0.0]);
        blur_noise(&mut f, 1, 1.0, &mut rng());
        assert!(f.modality_a.iter().all(|v| v.abs() == 2.0));
    }

    #[test]
    fn frame_drop_rates() {
        let mut ep = episode();
        let before = ep.clone();
        drop_frames(&mut ep, 0.0, &mut rng());
        assert_eq!(ep, before);
        drop_frames(&mut ep, 1.0, &mut rng());
        assert!(ep.frames.iter().all(|f| !f.valid_a && f.modality_a.iter().all(|&v| v == 0.0)));
        assert_eq!(ep.gt_relative, before.gt_relative);
        assert_eq!(ep.gt_global, before.gt_global);

        // binomial oracle: mean 1000, sd sqrt(10^4 * 0.1 * 0.9) = 30
        let mut r = rng();
        let dropped = (0..10_000).filter(|_| {
            let mut f = frame(vec![1.0]);
            let mut e = Episode {
                frames: vec![f.clone()],
                ..before.clone()
            };
            drop_frames(&mut e, 0.1, &mut r);
            f = e.frames.pop().unwrap();
            !f.valid_a
        });
        let n = dropped.count() as f64;
        assert!((n - 1000.0).abs() <= 90.0, "dropped {n}");
    }

    #[test]
    fn imu_bias_and_noise() {
        let mut f = frame(vec![0.0]);
        let before = f.modality_b.clone();
        imu_noise_bias(&mut f, 0.0, [0.0; 3], &mut rng());
        assert_eq!(f.modality_b, before);

        let mut f = frame(vec![0.0]);
        imu_noise_bias(&mut f, 0.0, [0.2, 0.0, 0.0], &mut rng());
        for (s, b) in f.modality_b.iter().zip(&before) {
            assert_eq!(s[0], b[0] + 0.2);
            assert_eq!(&s[1..], &b[1..]);
        }

        let mut f = SensorFrame {
            modality_b: vec![vec![0.0; 6]; 100_000],
            ..frame(vec![0.0])
        };
        imu_noise_bias(&mut f, 0.5, [0.0; 3], &mut rng());
        for ch in 3..6 {
            let xs: Vec<f64> = f.modality_b.iter().map(|s| s[ch]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var - 0.25).abs() < 0.025, "channel {ch} variance {var}");
        }
    }

    #[test]
    fn imu_drop_isolated_from_vision() {
        let mut ep = episode();
        let before = ep.clone();
        imu_drop(&mut ep, 0.0, &mut rng());
        assert_eq!(ep, before);
        imu_drop(&mut ep, 1.0, &mut rng());
        for (f, b) in ep.frames.iter().zip(&before.frames) {
            assert!(!f.valid_b);
            assert!(f.modality_b.iter().flatten().all(|&v| v == 0.0));
            assert_eq!(f.modality_a, b.modality_a);
        }
    }

    #[test]
    fn spatial_rotation() {
        let mut ep = episode();
        let before = ep.clone();
        spatial_misalign(&mut ep, 0.0, &mut rng()).unwrap();
        for (f, b) in ep.frames.iter().zip(&before.frames) {
            assert_eq!(f.modality_b, b.modality_b);
        }
        assert_eq!(
            spatial_misalign(&mut ep, 12.0, &mut rng()),
            Err(DegradationError::MaxDegOutOfRange(12.0))
        );

        let mut ep = before.clone();
        ep.frames[0].modality_b[0] = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let quarter = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        rotate_inertial(&mut ep, &quarter);
        let s = &ep.frames[0].modality_b[0];
        assert!(s[0].abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12 && s[2].abs() < 1e-12);

        let mut ep = before.clone();
        spatial_misalign(&mut ep, 10.0, &mut rng()).unwrap();
        for (f, b) in ep.frames.iter().zip(&before.frames) {
            for (s, o) in f.modality_b.iter().zip(&b.modality_b) {
                let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n(&s[..3]) - n(&o[..3])).abs() <= 1e-12 * n(&o[..3]).max(1.0));
                assert!((n(&s[3..]) - n(&o[3..])).abs() <= 1e-12 * n(&o[3..]).max(1.0));
            }
        }
        assert_eq!(ep.gt_global, before.gt_global);
    }

    #[test]
    fn temporal_shift() {
        let ep0 = episode();
        let m = ep0.frames[0].modality_b.len();
        let mut ep = ep0.clone();
        temporal_misalign(&mut ep, 0, 3).unwrap();
        for (f, b) in ep.frames.iter().zip(&ep0.frames) {
            assert_eq!(f.modality_b, b.modality_b);
        }
        assert_eq!(
            temporal_misalign(&mut ep, 4, 3),
            Err(DegradationError::ShiftTooLarge { shift: 4, max: 3 })
        );

        let mut ep = ep0.clone();
        shift_inertial(&mut ep, m as i64);
        assert!(ep.frames[0].modality_b.iter().flatten().all(|&v| v == 0.0));
        for t in 1..ep.len() {
            assert_eq!(ep.frames[t].modality_b, ep0.frames[t - 1].modality_b);
        }

        let mut ep = ep0.clone();
        shift_inertial(&mut ep, 3);
        shift_inertial(&mut ep, -3);
        let flat = |e: &Episode| -> Vec<Vec<f64>> { e.frames.iter().flat_map(|f| f.modality_b.clone()).collect() };
        let (a, b) = (flat(&ep), flat(&ep0));
        assert_eq!(&a[..a.len() - 3], &b[..b.len() - 3]);
    }

    #[test]
    fn apply_is_deterministic_and_annotated() {
        let ep = episode();
        let spec = DegradationSpec::preset("all-5pct", 3).unwrap();
        assert_eq!(spec.probabilities, Probabilities::uniform(0.05));
        let a = apply(&ep, &spec).unwrap();
        let b = apply(&ep, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gt_relative, ep.gt_relative);
        let heavy = DegradationSpec {
            probabilities: Probabilities::uniform(0.5),
            ..spec
        };
        let c = apply(&ep, &heavy).unwrap();
        assert!(c.frames.iter().any(|f| !f.degradations.is_empty()));
        for f in &c.frames {
            let missing = f.degradations.iter().any(|d| d.kind() == DegradationKind::Missing);
            assert_eq!(missing, !f.valid_a);
        }
        assert!(matches!(DegradationSpec::preset("fog", 0), Err(DegradationError::UnknownPreset(_))));
    }
}
