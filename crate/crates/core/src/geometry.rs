//! Poses, task losses, odometry metrics and the cylindrical range projection.
//!
//! Euler angles are `(roll, pitch, yaw)` with the rotation matrix
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. Relative poses are body-frame
//! increments: integrating multiplies them onto the running pose from the
//! right.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use nalgebra::{Isometry3, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("predicted quaternion has norm {0:e}, below 1e-12")]
    ZeroQuaternion(f64),
    #[error("ground-truth quaternion is not unit norm ({0})")]
    NonUnitGroundTruth(f64),
    #[error("no accumulated frames")]
    EmptyAccumulator,
    #[error("trajectory too short for any segment length; usable buckets: {usable:?}")]
    TrajectoryTooShort { usable: Vec<f64> },
    #[error("trajectories differ in length: {gt} vs {pred}")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("point at the origin has no direction")]
    OriginPoint,
    #[error("bin widths must be positive")]
    BadBinWidth,
    #[error("trajectory csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Absolute pose: position in meters and unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalPose {
    pub p: [f64; 3],
    pub q: [f64; 4],
}

/// Frame-to-frame motion: translation in meters and Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativePose {
    pub p: [f64; 3],
    pub r: [f64; 3],
}

impl GlobalPose {
    pub fn identity() -> Self {
        Self {
            p: [0.0; 3],
            q: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let [w, x, y, z] = self.q;
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Isometry3::from_parts(Translation3::new(self.p[0], self.p[1], self.p[2]), rot)
    }

    /// Canonical form with `w >= 0`.
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        let t = iso.translation.vector;
        Self {
            p: [t.x, t.y, t.z],
            q: [s * q.w, s * q.i, s * q.j, s * q.k],
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        let [x, y, z] = self.p;
        let [qw, qx, qy, qz] = self.q;
        [x, y, z, qw, qx, qy, qz]
    }
}

impl RelativePose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let rot = euler_to_rotation(self.r);
        Isometry3::from_parts(
            Translation3::new(self.p[0], self.p[1], self.p[2]),
            UnitQuaternion::from_rotation_matrix(&rot),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let t = iso.translation.vector;
        Self {
            p: [t.x, t.y, t.z],
            r: rotation_to_euler(&iso.rotation.to_rotation_matrix()),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [x, y, z] = self.p;
        let [a, b, c] = self.r;
        [x, y, z, a, b, c]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            p: [v[0], v[1], v[2]],
            r: [v[3], v[4], v[5]],
        }
    }
}

pub fn euler_to_rotation(r: [f64; 3]) -> Rotation3<f64> {
    Rotation3::from_euler_angles(r[0], r[1], r[2])
}

pub fn rotation_to_euler(rot: &Rotation3<f64>) -> [f64; 3] {
    let (roll, pitch, yaw) = rot.euler_angles();
    [roll, pitch, yaw]
}

/// Motion from `a` to `b` expressed in `a`'s frame.
pub fn relative_between(a: &GlobalPose, b: &GlobalPose) -> RelativePose {
    RelativePose::from_isometry(&(a.to_isometry().inverse() * b.to_isometry()))
}

/// Accumulates body-frame increments from `start`; returns `poses.len() + 1`
/// poses beginning with `start`.
pub fn integrate_relative(poses: &[RelativePose], start: &GlobalPose) -> Vec<GlobalPose> {
    let mut current = start.to_isometry();
    let mut out = Vec::with_capacity(poses.len() + 1);
    out.push(GlobalPose::from_isometry(&current));
    for rel in poses {
        current *= rel.to_isometry();
        out.push(GlobalPose::from_isometry(&current));
    }
    out
}

// ── task losses ────────────────────────────────────────────────────────

/// Norm applied to the translation and rotation residuals of relative poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseNorm {
    /// Squared Euclidean norm (mean squared error).
    Squared,
    /// Plain Euclidean norm.
    L2,
}

/// Loss weights for the two task families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Orientation weight of the global pose loss.
    pub lambda_global: f64,
    /// Rotation weight of the relative pose loss.
    pub lambda_relative: f64,
    pub norm: PoseNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_global: 10.0,
            lambda_relative: 100.0,
            norm: PoseNorm::Squared,
        }
    }
}

/// Batch-mean of `||p_hat - p||^2 + lambda ||r_hat - r||^2` (or plain norms)
/// for `pred` and `gt` of shape `[batch, 6]`.
pub fn relative_pose_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &Tensor,
    lambda: f64,
    norm: PoseNorm,
) -> Result<Var> {
    if tape.shape(pred) != gt.shape() || gt.rank() != 2 || gt.shape()[1] != 6 {
        return Err(TensorError::ShapeMismatch {
            op: "relative_pose_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        }
        .into());
    }
    let gt = tape.constant(gt.clone());
    let diff = tape.sub(pred, gt)?;
    let sq = tape.square(diff)?;
    let dp = tape.slice(sq, 1, 0, 3)?;
    let dr = tape.slice(sq, 1, 3, 6)?;
    let mut tp = tape.sum_axis(dp, 1)?;
    let mut tr = tape.sum_axis(dr, 1)?;
    if norm == PoseNorm::L2 {
        // offset keeps the derivative finite at a perfect prediction
        tp = tape.add_scalar(tp, 1e-12)?;
        tp = tape.sqrt(tp)?;
        tr = tape.add_scalar(tr, 1e-12)?;
        tr = tape.sqrt(tr)?;
    }
    let tr = tape.scale(tr, lambda)?;
    let per_row = tape.add(tp, tr)?;
    Ok(tape.mean(per_row)?)
}

/// Batch-mean of `sum|p_hat - p| + lambda sum|q_hat - q / ||q|||` for `pred`
/// and `gt` of shape `[batch, 7]` laid out `(px, py, pz, qw, qx, qy, qz)`.
/// The predicted quaternion is normalized inside the loss.
pub fn global_pose_loss(tape: &mut Tape, pred: Var, gt: &Tensor, lambda: f64) -> Result<Var> {
    if tape.shape(pred) != gt.shape() || gt.rank() != 2 || gt.shape()[1] != 7 {
        return Err(TensorError::ShapeMismatch {
            op: "global_pose_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        }
        .into());
    }
    for row in gt.data().chunks(7) {
        let n = row[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NonUnitGroundTruth(n));
        }
    }
    let q = tape.slice(pred, 1, 3, 7)?;
    for row in tape.value(q).data().chunks(4) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(GeometryError::ZeroQuaternion(n));
        }
    }
    let p = tape.slice(pred, 1, 0, 3)?;
    let gt_p = tape.constant(gt.slice(1, 0, 3)?);
    let gt_q = tape.constant(gt.slice(1, 3, 7)?);
    let q_sq = tape.square(q)?;
    let q_norm = tape.sum_axis(q_sq, 1)?;
    let q_norm = tape.sqrt(q_norm)?;
    let q_unit = tape.div(q, q_norm)?;
    let dp = tape.sub(p, gt_p)?;
    let dp = tape.abs(dp)?;
    let dp = tape.sum_axis(dp, 1)?;
    let dq = tape.sub(q_unit, gt_q)?;
    let dq = tape.abs(dq)?;
    let dq = tape.sum_axis(dq, 1)?;
    let dq = tape.scale(dq, lambda)?;
    let per_row = tape.add(dp, dq)?;
    Ok(tape.mean(per_row)?)
}

/// Single-sample convenience wrapper around [`relative_pose_loss`].
pub fn relative_pose_loss_value(pred: &RelativePose, gt: &RelativePose, lambda: f64, norm: PoseNorm) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, 6], pred.to_array().to_vec())?);
    let g = Tensor::new(vec![1, 6], gt.to_array().to_vec())?;
    let l = relative_pose_loss(&mut tape, p, &g, lambda, norm)?;
    Ok(tape.value(l).data()[0])
}

/// Single-sample convenience wrapper around [`global_pose_loss`].
pub fn global_pose_loss_value(pred: &GlobalPose, gt: &GlobalPose, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, 7], pred.to_array().to_vec())?);
    let g = Tensor::new(vec![1, 7], gt.to_array().to_vec())?;
    let l = global_pose_loss(&mut tape, p, &g, lambda)?;
    Ok(tape.value(l).data()[0])
}

// ── relative RMSE ──────────────────────────────────────────────────────

/// Per-frame residuals `t - t_hat` and `r - r_hat` for RMSE reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub translation_errors: Vec<[f64; 3]>,
    pub rotation_errors: Vec<[f64; 3]>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pred: &RelativePose, gt: &RelativePose) {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        self.translation_errors.push(sub(gt.p, pred.p));
        self.rotation_errors.push(sub(gt.r, pred.r));
    }

    pub fn len(&self) -> usize {
        self.translation_errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.translation_errors.is_empty()
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.translation_errors.extend_from_slice(&other.translation_errors);
        self.rotation_errors.extend_from_slice(&other.rotation_errors);
    }
}

/// `(t_rmse` in meters, `r_rmse` in degrees`)`.
pub fn relative_rmse(acc: &MetricsAccumulator) -> Result<(f64, f64)> {
    if acc.is_empty() {
        return Err(GeometryError::EmptyAccumulator);
    }
    let n = acc.len() as f64;
    let sq = |e: &[f64; 3]| e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
    let t = acc.translation_errors.iter().map(sq).sum::<f64>() / n;
    let r = acc.rotation_errors.iter().map(sq).sum::<f64>() / n;
    Ok((t.sqrt(), r.sqrt().to_degrees()))
}

// ── segment drift ──────────────────────────────────────────────────────

pub const DEFAULT_SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const SHORT_SEGMENT_LENGTHS: [f64; 8] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];

/// Default buckets, or the tenfold-shorter set when the path is under 100 m.
pub fn segment_lengths_for(path_length: f64) -> Vec<f64> {
    if path_length < DEFAULT_SEGMENT_LENGTHS[0] {
        SHORT_SEGMENT_LENGTHS.to_vec()
    } else {
        DEFAULT_SEGMENT_LENGTHS.to_vec()
    }
}

/// Cumulative traveled distance along the ground-truth positions.
pub fn path_distances(traj: &[GlobalPose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len());
    let mut acc = 0.0;
    for (i, pose) in traj.iter().enumerate() {
        if i > 0 {
            let prev = traj[i - 1].p;
            acc += ((pose.p[0] - prev[0]).powi(2) + (pose.p[1] - prev[1]).powi(2) + (pose.p[2] - prev[2]).powi(2)).sqrt();
        }
        out.push(acc);
    }
    out
}

/// Error of one subsequence, normalized by its nominal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub first: usize,
    pub length: f64,
    /// Endpoint translation error per meter.
    pub t_err: f64,
    /// Endpoint rotation error in radians per meter.
    pub r_err: f64,
}

/// Endpoint errors for every start frame and every length that fits.
///
/// A segment from frame `i` ends at the first frame `j` whose cumulative
/// ground-truth distance reaches `dist[i] + length`.
pub fn segment_errors(gt: &[GlobalPose], pred: &[GlobalPose], lengths: &[f64]) -> Result<Vec<SegmentError>> {
    if gt.len() != pred.len() {
        return Err(GeometryError::LengthMismatch {
            gt: gt.len(),
            pred: pred.len(),
        });
    }
    let dist = path_distances(gt);
    let gt_iso: Vec<_> = gt.iter().map(GlobalPose::to_isometry).collect();
    let pred_iso: Vec<_> = pred.iter().map(GlobalPose::to_isometry).collect();
    let mut out = Vec::new();
    for first in 0..gt.len() {
        for &length in lengths {
            let target = dist[first] + length;
            let Some(last) = (first..gt.len()).find(|&j| dist[j] >= target) else {
                continue;
            };
            let delta_gt = gt_iso[first].inverse() * gt_iso[last];
            let delta_pred = pred_iso[first].inverse() * pred_iso[last];
            let err = delta_pred.inverse() * delta_gt;
            out.push(SegmentError {
                first,
                length,
                t_err: err.translation.vector.norm() / length,
                r_err: err.rotation.angle() / length,
            });
        }
    }
    Ok(out)
}

/// Averaged drift over a set of segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// Translation drift in percent.
    pub t_rel: f64,
    /// Rotation drift in degrees per 100 m.
    pub r_rel: f64,
    pub segments: usize,
}

pub fn average_drift(errors: &[SegmentError]) -> Option<Drift> {
    if errors.is_empty() {
        return None;
    }
    let n = errors.len() as f64;
    let t = errors.iter().map(|e| e.t_err).sum::<f64>() / n;
    let r = errors.iter().map(|e| e.r_err).sum::<f64>() / n;
    Some(Drift {
        t_rel: 100.0 * t,
        r_rel: 100.0 * r.to_degrees(),
        segments: errors.len(),
    })
}

/// KITTI-style drift of `pred` against `gt` over the given bucket lengths.
pub fn segment_drift(gt: &[GlobalPose], pred: &[GlobalPose], lengths: &[f64]) -> Result<Drift> {
    let errors = segment_errors(gt, pred, lengths)?;
    average_drift(&errors).ok_or_else(|| {
        let total = path_distances(gt).last().copied().unwrap_or(0.0);
        GeometryError::TrajectoryTooShort {
            usable: SHORT_SEGMENT_LENGTHS
                .iter()
                .copied()
                .filter(|&l| l <= total)
                .collect(),
        }
    })
}

// ── cylindrical projection ─────────────────────────────────────────────

/// Continuous grid coordinates of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    /// Azimuth divided by the azimuth bin width.
    pub alpha: f64,
    /// Elevation divided by the elevation bin width.
    pub beta: f64,
    pub range: f64,
}

pub fn project_point(p: [f64; 3], d_alpha: f64, d_beta: f64) -> Result<ProjectedPoint> {
    if !(d_alpha > 0.0 && d_beta > 0.0) {
        return Err(GeometryError::BadBinWidth);
    }
    let range = Vector3::from(p).norm();
    if range == 0.0 {
        return Err(GeometryError::OriginPoint);
    }
    Ok(ProjectedPoint {
        alpha: p[1].atan2(p[0]) / d_alpha,
        // equals asin(z / range), better conditioned near the poles
        beta: p[2].atan2(p[0].hypot(p[1])) / d_beta,
        range,
    })
}

/// `H x W` single-channel range image. Azimuth `[-pi, pi)` maps to columns
/// `[0, W)` and elevation `[-pi/2, pi/2]` to rows `[0, H)`; the nearer point
/// wins a shared cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrid {
    pub d_alpha: f64,
    pub d_beta: f64,
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<f64>>,
    /// Points whose bin fell outside the grid.
    pub dropped: usize,
}

impl ProjectionGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.width + col]
    }

    /// Row and column for continuous coordinates, if inside the grid.
    pub fn bin(&self, pt: &ProjectedPoint) -> Option<(usize, usize)> {
        let col = ((pt.alpha * self.d_alpha + PI) / self.d_alpha).floor();
        let row = ((pt.beta * self.d_beta + FRAC_PI_2) / self.d_beta).floor();
        let col = if col as usize == self.width && pt.alpha * self.d_alpha >= PI { 0.0 } else { col };
        if col < 0.0 || row < 0.0 || col as usize >= self.width || row as usize >= self.height {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

pub fn cylindrical_project(
    points: &[[f64; 3]],
    d_alpha: f64,
    d_beta: f64,
    height: usize,
    width: usize,
) -> Result<ProjectionGrid> {
    let mut grid = ProjectionGrid {
        d_alpha,
        d_beta,
        height,
        width,
        cells: vec![None; height * width],
        dropped: 0,
    };
    for &p in points {
        let pt = project_point(p, d_alpha, d_beta)?;
        match grid.bin(&pt) {
            Some((r, c)) => {
                let cell = &mut grid.cells[r * width + c];
                if cell.map_or(true, |old| pt.range < old) {
                    *cell = Some(pt.range);
                }
            }
            None => grid.dropped += 1,
        }
    }
    Ok(grid)
}

// ── trajectory files ───────────────────────────────────────────────────

pub const GLOBAL_CSV_HEADER: &str = "frame,px,py,pz,qw,qx,qy,qz";
pub const RELATIVE_CSV_HEADER: &str = "frame,tx,ty,tz,roll,pitch,yaw";

pub fn global_trajectory_csv(traj: &[GlobalPose]) -> String {
    let mut s = String::from(GLOBAL_CSV_HEADER);
    s.push('\n');
    for (i, p) in traj.iter().enumerate() {
        let v = p.to_array();
        let _ = writeln!(s, "{i},{},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    }
    s
}

pub fn relative_trajectory_csv(traj: &[RelativePose]) -> String {
    let mut s = String::from(RELATIVE_CSV_HEADER);
    s.push('\n');
    for (i, p) in traj.iter().enumerate() {
        let v = p.to_array();
        let _ = writeln!(s, "{i},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5]);
    }
    s
}

fn parse_rows(text: &str, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => {
            return Err(GeometryError::Csv {
                line: 1,
                msg: format!("expected header `{header}`"),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let vals = l
                .split(',')
                .skip(1)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| GeometryError::Csv {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() != width {
                return Err(GeometryError::Csv {
                    line: i + 1,
                    msg: format!("expected {width} values, found {}", vals.len()),
                });
            }
            Ok(vals)
        })
        .collect()
}

pub fn parse_global_trajectory(text: &str) -> Result<Vec<GlobalPose>> {
    Ok(parse_rows(text, GLOBAL_CSV_HEADER, 7)?
        .into_iter()
        .map(|v| GlobalPose {
            p: [v[0], v[1], v[2]],
            q: [v[3], v[4], v[5], v[6]],
        })
        .collect())
}

pub fn parse_relative_trajectory(text: &str) -> Result<Vec<RelativePose>> {
    Ok(parse_rows(text, RELATIVE_CSV_HEADER, 6)?
        .iter()
        .map(|v| RelativePose::from_slice(v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn rel(p: [f64; 3], r: [f64; 3]) -> RelativePose {
        RelativePose { p, r }
    }

    #[test]
    fn global_loss_examples() {
        let gt = GlobalPose {
            p: [1.0, 2.0, 3.0],
            q: [0.5, 0.5, 0.5, 0.5],
        };
        let scaled = GlobalPose {
            p: gt.p,
            q: [1.0, 1.0, 1.0, 1.0],
        };
        assert!(global_pose_loss_value(&scaled, &gt, 10.0).unwrap().abs() < 1e-15);
        let off = GlobalPose {
            p: [2.0, 2.0, 3.0],
            q: gt.q,
        };
        assert!((global_pose_loss_value(&off, &gt, 10.0).unwrap() - 1.0).abs() < 1e-15);
        let a = GlobalPose {
            p: [0.0; 3],
            q: [1.0, 0.0, 0.0, 0.0],
        };
        let b = GlobalPose {
            p: [0.0; 3],
            q: [0.0, 1.0, 0.0, 0.0],
        };
        assert!((global_pose_loss_value(&a, &b, 10.0).unwrap() - 20.0).abs() < 1e-15);
    }

    #[test]
    fn global_loss_rejects_zero_quaternion() {
        let gt = GlobalPose::identity();
        let bad = GlobalPose {
            p: [0.0; 3],
            q: [0.0; 4],
        };
        assert!(matches!(global_pose_loss_value(&bad, &gt, 10.0), Err(GeometryError::ZeroQuaternion(_))));
    }

    #[test]
    fn relative_loss_examples() {
        let gt = rel([0.5, 0.1, 0.0], [0.01, 0.02, 0.3]);
        assert_eq!(relative_pose_loss_value(&gt, &gt, 100.0, PoseNorm::Squared).unwrap(), 0.0);
        let t = rel([1.5, 0.1, 0.0], gt.r);
        assert!((relative_pose_loss_value(&t, &gt, 100.0, PoseNorm::Squared).unwrap() - 1.0).abs() < 1e-12);
        let r = rel(gt.p, [0.11, 0.02, 0.3]);
        assert!((relative_pose_loss_value(&r, &gt, 100.0, PoseNorm::Squared).unwrap() - 1.0).abs() < 1e-12);
        // plain norm: |(0.3, 0.4, 0)| = 0.5, plus lambda * sqrt(1e-12) from the zero rotation residual
        let l2 = rel([0.8, 0.5, 0.0], gt.r);
        assert!((relative_pose_loss_value(&l2, &gt, 100.0, PoseNorm::L2).unwrap() - 0.5001).abs() < 1e-9);
    }

    #[test]
    fn rmse_examples() {
        let mut acc = MetricsAccumulator::new();
        assert!(matches!(relative_rmse(&acc), Err(GeometryError::EmptyAccumulator)));
        acc.push(&rel([3.0, 0.0, 0.0], [0.0; 3]), &RelativePose::identity());
        acc.push(&rel([0.0, 4.0, 0.0], [0.0; 3]), &RelativePose::identity());
        let (t, r) = relative_rmse(&acc).unwrap();
        assert!((t - (12.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(r, 0.0);

        let mut one = MetricsAccumulator::new();
        one.push(&rel([0.0; 3], [0.0, 0.0, 1f64.to_radians()]), &RelativePose::identity());
        assert!((relative_rmse(&one).unwrap().1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn integration_examples() {
        let start = GlobalPose {
            p: [1.0, -2.0, 0.5],
            q: [1.0, 0.0, 0.0, 0.0],
        };
        let still = integrate_relative(&[RelativePose::identity(); 4], &start);
        assert_eq!(still.len(), 5);
        assert!(still.iter().all(|p| p == &start));

        let two = integrate_relative(&[rel([1.0, 0.0, 0.0], [0.0; 3]); 2], &start);
        assert!((two[2].p[0] - 3.0).abs() < 1e-12);

        let turn = [
            rel([1.0, 0.0, 0.0], [0.0; 3]),
            rel([0.0; 3], [0.0, 0.0, FRAC_PI_2]),
            rel([1.0, 0.0, 0.0], [0.0; 3]),
        ];
        let end = integrate_relative(&turn, &GlobalPose::identity())[3];
        assert!((end.p[0] - 1.0).abs() < 1e-9 && (end.p[1] - 1.0).abs() < 1e-9 && end.p[2].abs() < 1e-9);
    }

    #[test]
    fn euler_round_trip() {
        let r = [0.3, -0.7, 1.2];
        let back = rotation_to_euler(&euler_to_rotation(r));
        for i in 0..3 {
            assert!((back[i] - r[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_examples() {
        let gt: Vec<_> = (0..120)
            .map(|i| GlobalPose {
                p: [i as f64, 0.0, 0.0],
                q: [1.0, 0.0, 0.0, 0.0],
            })
            .collect();
        let same = segment_drift(&gt, &gt, &SHORT_SEGMENT_LENGTHS).unwrap();
        assert!(same.t_rel.abs() < 1e-12 && same.r_rel.abs() < 1e-12);
        let pred: Vec<_> = gt
            .iter()
            .map(|p| GlobalPose {
                p: [p.p[0] * 1.01, 0.0, 0.0],
                q: p.q,
            })
            .collect();
        for &len in &SHORT_SEGMENT_LENGTHS {
            let d = segment_drift(&gt, &pred, &[len]).unwrap();
            assert!((d.t_rel - 1.0).abs() < 1e-9, "{len}: {}", d.t_rel);
        }
        match segment_drift(&gt[..5], &pred[..5], &DEFAULT_SEGMENT_LENGTHS) {
            Err(GeometryError::TrajectoryTooShort { usable }) => assert!(usable.is_empty()),
            other => panic!("{other:?}"),
        }
        assert_eq!(segment_lengths_for(50.0), SHORT_SEGMENT_LENGTHS.to_vec());
        assert_eq!(segment_lengths_for(500.0), DEFAULT_SEGMENT_LENGTHS.to_vec());
    }

    #[test]
    fn projection_examples() {
        let p = project_point([1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!((p.alpha, p.beta, p.range), (0.0, 0.0, 1.0));
        let p = project_point([1.0, 1.0, 2f64.sqrt()], 1.0, 1.0).unwrap();
        assert!((p.alpha - FRAC_PI_4).abs() < 1e-15);
        assert!((p.beta - FRAC_PI_4).abs() < 1e-15);
        assert!((p.range - 2.0).abs() < 1e-15);
        assert!(matches!(project_point([0.0; 3], 1.0, 1.0), Err(GeometryError::OriginPoint)));

        let grid = cylindrical_project(&[[2.0, 0.1, 0.0], [5.0, 0.25, 0.0]], 0.1, 0.1, 32, 63).unwrap();
        let cells: Vec<_> = grid.cells.iter().flatten().collect();
        assert_eq!(cells.len(), 1);
        assert!((cells[0] - (4.0f64 + 0.01).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let traj = integrate_relative(&[rel([1.0, 0.2, 0.0], [0.0, 0.0, 0.1]); 3], &GlobalPose::identity());
        let back = parse_global_trajectory(&global_trajectory_csv(&traj)).unwrap();
        assert_eq!(back, traj);
        let rels = vec![rel([1.0, 0.5, -0.25], [0.1, 0.2, 0.3])];
        assert_eq!(parse_relative_trajectory(&relative_trajectory_csv(&rels)).unwrap(), rels);
        assert!(parse_global_trajectory("bogus\n1,2").is_err());
    }
}
