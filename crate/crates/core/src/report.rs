//! CSV summaries and static SVG plots built from run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{integrate_relative, GlobalPose, RelativePose};
use crate::harness::{normalized_global, parse_masks_csv, parse_metrics_csv, ExperimentConfig, HarnessError, MetricRow, RunPaths};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{dir}: missing {}", files.join(", "))]
    MissingArtifacts { dir: PathBuf, files: Vec<String> },
    #[error("malformed {file}: {msg}")]
    Parse { file: PathBuf, msg: String },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ReportError>;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Axis range padded so that a flat series still gets a visible span.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn open_svg(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str, xr: (f64, f64), yr: (f64, f64)) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1} {y1:.1} L{x0:.1} {y0:.1} L{x1:.1} {y0:.1}" stroke="black" fill="none"/>"#
    );
    for (v, anchor, x, y) in [
        (xr.0, "start", x0, y0 + 16.0),
        (xr.1, "end", x1, y0 + 16.0),
        (yr.0, "end", x0 - 4.0, y0),
        (yr.1, "end", x0 - 4.0, y1 + 4.0),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.3}</text>"#
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = WIDTH - MARGIN / 2.0 - 120.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            x + 14.0,
            escape(name)
        );
    }
}

/// Line plot of one or more series. Equal axis scaling keeps trajectory
/// shapes undistorted when `equal_aspect` is set.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], equal_aspect: bool) -> String {
    let mut xr = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let mut yr = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = (WIDTH - 1.5 * MARGIN, HEIGHT - 2.0 * MARGIN);
    if equal_aspect {
        let scale = ((xr.1 - xr.0) / pw).max((yr.1 - yr.0) / ph);
        let (cx, cy) = ((xr.0 + xr.1) / 2.0, (yr.0 + yr.1) / 2.0);
        xr = (cx - scale * pw / 2.0, cx + scale * pw / 2.0);
        yr = (cy - scale * ph / 2.0, cy + scale * ph / 2.0);
    }
    let sx = |x: f64| MARGIN + (x - xr.0) / (xr.1 - xr.0) * pw;
    let sy = |y: f64| HEIGHT - MARGIN - (y - yr.0) / (yr.1 - yr.0) * ph;
    let mut out = String::new();
    open_svg(&mut out, title);
    axes(&mut out, x_label, y_label, xr, yr);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart; every group holds one value per series.
pub fn bar_chart_svg(title: &str, y_label: &str, series_names: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    open_svg(&mut out, title);
    let top = groups
        .iter()
        .flat_map(|g| g.1.iter().copied())
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let yr = (0.0, top);
    axes(&mut out, "", y_label, (0.0, groups.len() as f64), yr);
    let (pw, ph) = (WIDTH - 1.5 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let gw = pw / groups.len().max(1) as f64;
    let bw = 0.8 * gw / series_names.len().max(1) as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let gx = MARGIN + g as f64 * gw + 0.1 * gw;
        for (i, &v) in values.iter().enumerate() {
            let h = if v.is_finite() { v / yr.1 * ph } else { 0.0 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="{}"/>"#,
                gx + i as f64 * bw,
                HEIGHT - MARGIN - h,
                PALETTE[i % PALETTE.len()]
            );
        }
        let cx = gx + 0.4 * gw;
        let cy = HEIGHT - MARGIN + 12.0;
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{cy:.2}" font-family="sans-serif" font-size="9" text-anchor="end" transform="rotate(-30 {cx:.2} {cy:.2})">{}</text>"#,
            escape(label)
        );
    }
    legend(&mut out, series_names);
    out.push_str("</svg>\n");
    out
}

/// Top-down (x, y) overlay of ground truth and prediction.
pub fn trajectory_svg(title: &str, gt: &[GlobalPose], pred: &[GlobalPose]) -> String {
    let xy = |t: &[GlobalPose]| t.iter().map(|p| (p.p[0], p.p[1])).collect();
    line_plot_svg(
        title,
        "x [m]",
        "y [m]",
        &[
            Series {
                name: "ground truth".into(),
                points: xy(gt),
            },
            Series {
                name: "estimate".into(),
                points: xy(pred),
            },
        ],
        true,
    )
}

/// Train/validation loss curves from `metrics.csv` rows.
pub fn loss_curve_svg(rows: &[MetricRow]) -> String {
    let series: Vec<Series> = ["train", "val"]
        .iter()
        .map(|section| Series {
            name: section.to_string(),
            points: rows
                .iter()
                .filter(|r| r.section == *section && r.metric == "loss")
                .filter_map(|r| r.epoch.map(|e| (e as f64, r.value)))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    line_plot_svg("Loss", "epoch", "loss", &series, false)
}

/// Ground-truth and predicted trajectories per episode from
/// `predictions.csv`.
pub fn parse_predictions(text: &str) -> std::result::Result<Vec<(u64, Vec<GlobalPose>, Vec<GlobalPose>)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let width = (header.split(',').count() - 2) / 2;
    if width != 6 && width != 7 {
        return Err(format!("unexpected column count in header `{header}`"));
    }
    let mut episodes: Vec<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 + 2 * width {
            return Err(format!("line {}: wrong field count", i + 2));
        }
        let id: u64 = cells[0].parse().map_err(|_| format!("line {}: bad episode", i + 2))?;
        let vals = cells[2..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format!("line {}: bad number", i + 2))?;
        if episodes.last().map_or(true, |e| e.0 != id) {
            episodes.push((id, Vec::new(), Vec::new()));
        }
        let e = episodes.last_mut().unwrap();
        e.1.push(vals[..width].to_vec());
        e.2.push(vals[width..].to_vec());
    }
    Ok(episodes
        .into_iter()
        .map(|(id, pred, gt)| {
            if width == 6 {
                let integrate = |rows: &[Vec<f64>]| {
                    let rel: Vec<RelativePose> = rows.iter().map(|r| RelativePose::from_slice(r)).collect();
                    integrate_relative(&rel, &GlobalPose::identity())
                };
                (id, integrate(&gt), integrate(&pred))
            } else {
                let poses = |rows: &[Vec<f64>]| rows.iter().map(|r| normalized_global(r)).collect::<Vec<_>>();
                (id, poses(&gt), poses(&pred))
            }
        })
        .collect())
}

/// Files written and warnings raised by [`generate_report`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str, out: &mut ReportOutput) -> Result<()> {
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    out.files.push(path.to_path_buf());
    Ok(())
}

fn metric(rows: &[MetricRow], name: &str) -> Option<f64> {
    rows.iter().find(|r| r.section == "test" && r.metric == name).map(|r| r.value)
}

pub const SUMMARY_HEADER: &str = "run,fusion,t_rmse,t_rmse_std,r_rmse,r_rmse_std,drift_t_rel,drift_r_rel";

/// Writes plots for every run directory into `out_dir/<run name>/` and a
/// `summary.csv` with one row per run.
pub fn generate_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    let mut out = ReportOutput::default();
    for dir in run_dirs {
        let paths = RunPaths::new(dir);
        let missing: Vec<String> = [paths.metrics(), paths.masks()]
            .iter()
            .filter(|p| !p.exists())
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        if !missing.is_empty() {
            return Err(ReportError::MissingArtifacts {
                dir: dir.clone(),
                files: missing,
            });
        }
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for (idx, dir) in run_dirs.iter().enumerate() {
        let paths = RunPaths::new(dir);
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("run{idx}"));
        let target = out_dir.join(&name);
        fs::create_dir_all(&target).map_err(|source| ReportError::Io {
            path: target.clone(),
            source,
        })?;
        let rows = parse_metrics_csv(&read(&paths.metrics())?)?;
        write(&target.join("loss.svg"), &loss_curve_svg(&rows), &mut out)?;

        let masks = parse_masks_csv(&read(&paths.masks())?)?;
        if masks.is_empty() {
            out.warnings.push(format!("{name}: mask log is empty, selection chart omitted"));
        } else {
            let mut groups = Vec::new();
            if let Ok(text) = fs::read_to_string(paths.mask_report()) {
                for line in text.lines().skip(1) {
                    let f: Vec<&str> = line.split(',').collect();
                    if f.len() != 5 {
                        return Err(ReportError::Parse {
                            file: paths.mask_report(),
                            msg: format!("bad line `{line}`"),
                        });
                    }
                    let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
                    groups.push((format!("{}: {}", f[0], f[1]), vec![num(f[3]), num(f[4])]));
                }
            } else {
                let n = masks.len() as f64;
                groups.push((
                    "overall: all".to_string(),
                    vec![
                        masks.iter().map(|m| m.rate_a).sum::<f64>() / n,
                        masks.iter().map(|m| m.rate_b).sum::<f64>() / n,
                    ],
                ));
            }
            let svg = bar_chart_svg("Feature selection rate", "selected share", &["modality a", "modality b"], &groups);
            write(&target.join("selection.svg"), &svg, &mut out)?;
        }

        match fs::read_to_string(paths.predictions()) {
            Ok(text) => {
                let trajs = parse_predictions(&text).map_err(|msg| ReportError::Parse {
                    file: paths.predictions(),
                    msg,
                })?;
                for (id, gt, pred) in trajs {
                    let svg = trajectory_svg(&format!("Episode {id}"), &gt, &pred);
                    write(&target.join(format!("trajectory_{id}.svg")), &svg, &mut out)?;
                }
            }
            Err(_) => out.warnings.push(format!("{name}: no predictions.csv, trajectory plots omitted")),
        }

        let fusion = fs::read_to_string(paths.config())
            .ok()
            .and_then(|t| ExperimentConfig::from_toml(&t).ok())
            .map(|c| c.fusion.name().to_string())
            .unwrap_or_else(|| "unknown".to_string());
        let cell = |m: &str| metric(&rows, m).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            summary,
            "{name},{fusion},{},{},{},{},{},{}",
            cell("t_rmse"),
            cell("t_rmse_std"),
            cell("r_rmse"),
            cell("r_rmse_std"),
            cell("drift_t_rel"),
            cell("drift_r_rel")
        );
    }
    write(&out_dir.join("summary.csv"), &summary, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_stable_and_escaped() {
        let s = vec![Series {
            name: "a < b & c".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)],
        }];
        let one = line_plot_svg("t", "x", "y", &s, false);
        assert_eq!(one, line_plot_svg("t", "x", "y", &s, false));
        assert!(one.contains("a &lt; b &amp; c"));
        assert!(!one.contains("NaN"));
    }

    #[test]
    fn flat_series_has_a_span() {
        assert_eq!(span([2.0, 2.0].into_iter()), (1.5, 2.5));
        assert_eq!(span(std::iter::empty()), (0.0, 1.0));
    }

    #[test]
    fn predictions_round_trip_to_trajectories() {
        let text = "episode,frame,pred_0,pred_1,pred_2,pred_3,pred_4,pred_5,gt_0,gt_1,gt_2,gt_3,gt_4,gt_5\n\
                    3,1,1,0,0,0,0,0,1,0,0,0,0,0\n3,2,1,0,0,0,0,0,2,0,0,0,0,0\n";
        let t = parse_predictions(text).unwrap();
        assert_eq!(t.len(), 1);
        let (id, gt, pred) = &t[0];
        assert_eq!(*id, 3);
        assert_eq!(gt.len(), 3);
        assert!((gt[2].p[0] - 3.0).abs() < 1e-12);
        assert!((pred[2].p[0] - 2.0).abs() < 1e-12);
    }
}
