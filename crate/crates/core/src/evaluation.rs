//! Equal error rate, score files, and the per-dataset report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub name: String,
    pub score: f64,
    pub label: Option<Label>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    /// Percent, in `[0, 100]`.
    pub eer: f64,
    pub threshold: f64,
}

/// One `(threshold, FRR, FAR)` point per distinct score, followed by a
/// closing point above every score (FRR = 1, FAR = 0) placed at the maximum.
pub fn sweep(bonafide: &[f64], spoof: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut b = bonafide.to_vec();
    let mut s = spoof.to_vec();
    b.sort_by(f64::total_cmp);
    s.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = b.iter().chain(&s).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let (nb, ns) = (b.len() as f64, s.len() as f64);
    let mut points = Vec::with_capacity(all.len() + 1);
    for &t in &all {
        let below = b.partition_point(|&x| x < t) as f64;
        let spoof_above = (s.len() - s.partition_point(|&x| x < t)) as f64;
        points.push((t, below / nb, spoof_above / ns));
    }
    points.push((*all.last().expect("non-empty"), 1.0, 0.0));
    points
}

/// Threshold sweep over distinct scores with FRR = P(bonafide < t) and
/// FAR = P(spoof ≥ t). The EER is read at the first sign change of FAR − FRR,
/// interpolating linearly between the two bracketing sweep points.
pub fn compute_eer(bonafide: &[f64], spoof: &[f64]) -> Result<Eer> {
    if bonafide.is_empty() || spoof.is_empty() {
        return Err(Error::InsufficientData("EER needs bonafide and spoof scores".into()));
    }
    if bonafide.iter().chain(spoof).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pts = sweep(bonafide, spoof);
    for w in pts.windows(2) {
        let (t0, frr0, far0) = w[0];
        let (t1, frr1, far1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok(Eer {
                eer: 100.0 * far0,
                threshold: t0,
            });
        }
        if d0 > 0.0 && d1 < 0.0 {
            let a = d0 / (d0 - d1);
            return Ok(Eer {
                eer: 100.0 * (frr0 + a * (frr1 - frr0)),
                threshold: t0 + a * (t1 - t0),
            });
        }
    }
    unreachable!("the closing sweep point always has FAR − FRR = −1")
}

pub fn eer_from_scores(scores: &[TrialScore]) -> Result<Eer> {
    let pick = |l: Label| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| s.label == Some(l))
            .map(|s| s.score)
            .collect()
    };
    compute_eer(&pick(Label::Bonafide), &pick(Label::Spoof))
}

/// `utt_path<TAB>score<TAB>label` per line; scores use the shortest
/// round-trip representation.
pub fn write_scores(path: &Path, scores: &[TrialScore]) -> Result<()> {
    let mut out = String::new();
    for s in scores {
        let label = s.label.map_or("-", Label::as_str);
        writeln!(out, "{}\t{}\t{}", s.name, s.score, label).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", f.len())));
        }
        let score = f[1]
            .parse::<f64>()
            .map_err(|e| parse_err(format!("bad score {:?}: {e}", f[1])))?;
        let label = match f[2] {
            "-" => None,
            l => Some(l.parse::<Label>().map_err(|_| parse_err(format!("bad label {l:?}")))?),
        };
        out.push(TrialScore {
            name: f[0].to_string(),
            score,
            label,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub views: String,
    pub mode: String,
    pub eer: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
    pub threshold: f64,
    /// How many runs were averaged into this row.
    pub runs: usize,
}

impl ReportRow {
    pub fn from_scores(dataset: &str, views: &str, mode: &str, scores: &[TrialScore]) -> Result<Self> {
        let e = eer_from_scores(scores)?;
        let count = |l| scores.iter().filter(|s| s.label == Some(l)).count();
        Ok(ReportRow {
            dataset: dataset.to_string(),
            views: views.to_string(),
            mode: mode.to_string(),
            eer: e.eer,
            n_bonafide: count(Label::Bonafide),
            n_spoof: count(Label::Spoof),
            threshold: e.threshold,
            runs: 1,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub checkpoint_id: String,
    pub seeds: Vec<u64>,
}

/// Averages EERs (and thresholds) of rows sharing dataset, views and mode.
/// Row order follows first appearance.
pub fn average_over_seeds(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.views.clone(), r.mode.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            ReportRow {
                eer: g.iter().map(|r| r.eer).sum::<f64>() / n,
                threshold: g.iter().map(|r| r.threshold).sum::<f64>() / n,
                runs: g.iter().map(|r| r.runs).sum(),
                ..g[0].clone()
            }
        })
        .collect()
}

/// Two decimals; exact ties round to even.
pub fn format_eer(eer: f64) -> String {
    format!("{eer:.2}")
}

/// Aligned plain-text table and line-delimited `key=value` rendering.
pub fn render_report(report: &EvalReport) -> Result<(String, String)> {
    if report.rows.is_empty() {
        return Err(Error::InsufficientData("report has no rows".into()));
    }
    for r in &report.rows {
        if r.eer > 50.0 {
            log::warn!("{} {}: EER {:.2}% is worse than chance", r.dataset, r.views, r.eer);
        }
    }
    let header = ["dataset", "views", "mode", "EER(%)", "bonafide", "spoof", "threshold", "runs"];
    let cells: Vec<[String; 8]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.views.clone(),
                r.mode.clone(),
                format_eer(r.eer),
                r.n_bonafide.to_string(),
                r.n_spoof.to_string(),
                format!("{:.4}", r.threshold),
                r.runs.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |fields: Vec<&str>| {
        fields
            .iter()
            .zip(widths)
            .map(|(f, w)| format!("{f:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut text = line(header.to_vec());
    text.push('\n');
    for row in &cells {
        text.push_str(&line(row.iter().map(String::as_str).collect()));
        text.push('\n');
    }

    let mut kv = String::new();
    writeln!(kv, "checkpoint={}", report.checkpoint_id).unwrap();
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    writeln!(kv, "seeds={}", seeds.join(",")).unwrap();
    for (i, r) in report.rows.iter().enumerate() {
        writeln!(kv, "row{i}.dataset={}", r.dataset).unwrap();
        writeln!(kv, "row{i}.views={}", r.views).unwrap();
        writeln!(kv, "row{i}.mode={}", r.mode).unwrap();
        writeln!(kv, "row{i}.eer={}", format_eer(r.eer)).unwrap();
        writeln!(kv, "row{i}.n_bonafide={}", r.n_bonafide).unwrap();
        writeln!(kv, "row{i}.n_spoof={}", r.n_spoof).unwrap();
        writeln!(kv, "row{i}.threshold={}", r.threshold).unwrap();
        writeln!(kv, "row{i}.runs={}", r.runs).unwrap();
    }
    Ok((text, kv))
}
