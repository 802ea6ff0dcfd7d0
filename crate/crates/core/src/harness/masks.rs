use std::collections::{BTreeSet, HashMap};

use super::eval::MaskRecord;
use super::{HarnessError, Result};
use crate::degradation::DegradationKind;
use crate::simulator::Episode;

/// Upper edges of the yaw-rate buckets, rad/frame.
pub const TURN_EDGES: [f64; 2] = [0.1, 0.2];
/// Upper edges of the speed buckets, m/frame.
pub const SPEED_EDGES: [f64; 2] = [0.75, 1.25];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub table: &'static str,
    pub bucket: String,
    pub frames: usize,
    pub rate_a: f64,
    pub rate_b: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskReport {
    pub rows: Vec<ReportRow>,
}

impl MaskReport {
    pub fn table(&self, name: &str) -> impl Iterator<Item = &ReportRow> {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.table == name)
    }

    pub fn row(&self, table: &str, bucket: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.table == table && r.bucket == bucket)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,bucket,frames,rate_a,rate_b\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.table, r.bucket, r.frames, r.rate_a, r.rate_b));
        }
        s
    }
}

/// Degradation label of a frame: `clean`, the single corruption it carries,
/// or `mixed`.
pub fn degradation_bucket(ep: &Episode, frame: usize) -> String {
    let kinds: BTreeSet<DegradationKind> = ep.frames[frame].degradations.iter().map(|d| d.kind()).collect();
    match kinds.len() {
        0 => "clean".to_string(),
        1 => kinds.into_iter().next().unwrap().name().to_string(),
        _ => "mixed".to_string(),
    }
}

fn bucket_label(value: f64, edges: [f64; 2], unit: &str) -> String {
    if value < edges[0] {
        format!("{unit}<{}", edges[0])
    } else if value < edges[1] {
        format!("{}<={unit}<{}", edges[0], edges[1])
    } else {
        format!("{unit}>={}", edges[1])
    }
}

pub fn turn_bucket(ep: &Episode, frame: usize) -> String {
    bucket_label(ep.gt_relative[frame - 1].r[2].abs(), TURN_EDGES, "turn")
}

pub fn speed_bucket(ep: &Episode, frame: usize) -> String {
    let p = ep.gt_relative[frame - 1].p;
    bucket_label((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt(), SPEED_EDGES, "speed")
}

fn bucket_order(table: &str) -> Vec<String> {
    match table {
        "degradation" => std::iter::once("clean".to_string())
            .chain(DegradationKind::ALL.iter().map(|k| k.name().to_string()))
            .chain(std::iter::once("mixed".to_string()))
            .collect(),
        "turn" => vec![0.0, 0.15, 1.0].into_iter().map(|v| bucket_label(v, TURN_EDGES, "turn")).collect(),
        "speed" => vec![0.0, 1.0, 2.0].into_iter().map(|v| bucket_label(v, SPEED_EDGES, "speed")).collect(),
        _ => vec!["all".to_string()],
    }
}

/// Mean selection rate of each modality, overall and split by degradation,
/// turn-rate and speed buckets. Each split partitions the logged frames.
pub fn mask_report(masks: &[MaskRecord], episodes: &[Episode]) -> Result<MaskReport> {
    let by_id: HashMap<u64, &Episode> = episodes.iter().map(|e| (e.id, e)).collect();
    let tables: [(&'static str, fn(&Episode, usize) -> String); 4] = [
        ("overall", |_, _| "all".to_string()),
        ("degradation", degradation_bucket),
        ("turn", turn_bucket),
        ("speed", speed_bucket),
    ];
    let mut sums: HashMap<(&'static str, String), (usize, f64, f64)> = HashMap::new();
    for m in masks {
        let ep = by_id
            .get(&m.episode)
            .filter(|e| m.frame >= 1 && m.frame < e.len())
            .ok_or(HarnessError::JoinMismatch {
                episode: m.episode,
                frame: m.frame,
            })?;
        for (table, label) in &tables {
            let e = sums.entry((*table, label(ep, m.frame))).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += m.rate_a;
            e.2 += m.rate_b;
        }
    }
    let mut rows = Vec::new();
    for (table, _) in &tables {
        for bucket in bucket_order(table) {
            if let Some(&(n, a, b)) = sums.get(&(*table, bucket.clone())) {
                rows.push(ReportRow {
                    table,
                    bucket,
                    frames: n,
                    rate_a: a / n as f64,
                    rate_b: b / n as f64,
                });
            }
        }
    }
    Ok(MaskReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::drop_frame;
    use crate::simulator::{generate_episode, SimConfig};

    fn episodes() -> Vec<Episode> {
        let cfg = SimConfig {
            frames: 30,
            ..Default::default()
        };
        (0..3).map(|i| generate_episode(i, i, &cfg).unwrap()).collect()
    }

    fn log(eps: &[Episode], f: impl Fn(&Episode, usize) -> (f64, f64)) -> Vec<MaskRecord> {
        eps.iter()
            .flat_map(|e| {
                let f = &f;
                (1..e.len()).map(move |t| {
                    let (a, b) = f(e, t);
                    MaskRecord {
                        episode: e.id,
                        frame: t,
                        rate_a: a,
                        rate_b: b,
                        mask_a: vec![],
                        mask_b: vec![],
                    }
                })
            })
            .collect()
    }

    #[test]
    fn all_ones_gives_unit_rates() {
        let eps = episodes();
        let r = mask_report(&log(&eps, |_, _| (1.0, 1.0)), &eps).unwrap();
        assert!(r.rows.iter().all(|row| row.rate_a == 1.0 && row.rate_b == 1.0));
    }

    #[test]
    fn zeroed_on_dropped_frames() {
        let mut eps = episodes();
        for e in &mut eps {
            for t in (2..e.len()).step_by(4) {
                drop_frame(&mut e.frames[t]);
            }
        }
        let masks = log(&eps, |e, t| (if e.frames[t].valid_a { 0.7 } else { 0.0 }, 0.9));
        let r = mask_report(&masks, &eps).unwrap();
        let missing = r.row("degradation", "missing").unwrap();
        assert_eq!(missing.rate_a, 0.0);
        assert!((missing.rate_b - 0.9).abs() < 1e-12);
        assert!((r.row("degradation", "clean").unwrap().rate_a - 0.7).abs() < 1e-12);
        let total = masks.len();
        for table in ["overall", "degradation", "turn", "speed"] {
            assert_eq!(r.table(table).map(|row| row.frames).sum::<usize>(), total, "{table}");
        }
    }

    #[test]
    fn unknown_frames_fail_to_join() {
        let eps = episodes();
        let mut masks = log(&eps, |_, _| (1.0, 1.0));
        masks[0].episode = 99;
        assert!(matches!(mask_report(&masks, &eps), Err(HarnessError::JoinMismatch { episode: 99, .. })));
        let mut masks = log(&eps, |_, _| (1.0, 1.0));
        masks[0].frame = 30;
        assert!(matches!(mask_report(&masks, &eps), Err(HarnessError::JoinMismatch { .. })));
    }
}
