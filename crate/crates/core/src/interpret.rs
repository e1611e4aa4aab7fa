//! Attention aggregation over correctly classified test subjects, selection
//! of predictive clusters and their tracts, and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::train::{FusionSummary, RunResults};

/// Assignment of clusters to named tracts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TractEntry {
    pub cluster_id: usize,
    pub tract_id: usize,
    pub tract_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TractMap {
    by_cluster: BTreeMap<usize, TractEntry>,
}

impl TractMap {
    pub fn new(entries: Vec<TractEntry>) -> Result<Self> {
        let mut by_cluster = BTreeMap::new();
        for e in entries {
            let id = e.cluster_id;
            if by_cluster.insert(id, e).is_some() {
                return Err(Error::input(format!("cluster {id} appears twice in the tract map")));
            }
        }
        Ok(Self { by_cluster })
    }

    pub fn tract_of(&self, cluster: usize) -> Option<&str> {
        self.by_cluster.get(&cluster).map(|e| e.tract_name.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = &TractEntry> {
        self.by_cluster.values()
    }

    pub fn len(&self) -> usize {
        self.by_cluster.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_cluster.is_empty()
    }

    /// Clusters belonging to `tract_name`, ascending.
    pub fn clusters_of(&self, tract_name: &str) -> Vec<usize> {
        self.entries()
            .filter(|e| e.tract_name == tract_name)
            .map(|e| e.cluster_id)
            .collect()
    }

    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in self.entries() {
            w.serialize(e).map_err(|e| Error::input(e.to_string()))?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::input(e.to_string()))?)
            .expect("csv is utf-8");
        Ok(comment.map(|c| format!("# {c}\n")).unwrap_or_default() + &body)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let entries = io::csv_reader(text)
            .deserialize::<TractEntry>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| io::csv_error(path, e))?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_csv(&io::read_text(path)?, path)
    }
}

/// Mean score per cluster over subjects flagged correct, and how many
/// subjects contributed.
pub fn aggregate_attention(scores: &[&[f64]], correct: &[bool]) -> Result<(Vec<f64>, usize)> {
    if scores.len() != correct.len() {
        return Err(Error::input(format!(
            "{} score vectors but {} correctness flags",
            scores.len(),
            correct.len()
        )));
    }
    let n = scores.first().map_or(0, |s| s.len());
    if let Some(bad) = scores.iter().position(|s| s.len() != n) {
        return Err(Error::input(format!(
            "score vector {bad} has length {}, expected {n}",
            scores[bad].len()
        )));
    }
    let kept: Vec<&[f64]> = scores
        .iter()
        .zip(correct)
        .filter(|(_, &c)| c)
        .map(|(s, _)| *s)
        .collect();
    if kept.is_empty() {
        return Err(Error::input("no correctly predicted subjects; attention report impossible"));
    }
    let count = kept.len();
    let mean = (0..n)
        .map(|c| kept.iter().map(|s| s[c]).sum::<f64>() / count as f64)
        .collect();
    Ok((mean, count))
}

/// Cut used to call a cluster predictive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRule {
    /// Scores strictly above μ + k·σ (population σ over clusters).
    MeanPlusSd { k: f64 },
    /// The ⌈q/100 · N⌉ highest scores, ties by lower cluster index.
    TopPercent { q: f64 },
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::MeanPlusSd { k: 1.5 }
    }
}

impl SelectionRule {
    pub fn name(&self) -> String {
        match self {
            SelectionRule::MeanPlusSd { k } => format!("mean+{k}sd"),
            SelectionRule::TopPercent { q } => format!("top{q}pct"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionRule::MeanPlusSd { k } if !k.is_finite() => Err(Error::config("sd multiplier must be finite")),
            SelectionRule::TopPercent { q } if !(q > 0.0 && q <= 100.0) => {
                Err(Error::config(format!("top-q percentage must be in (0, 100], got {q}")))
            }
            _ => Ok(()),
        }
    }
}

/// Indices of predictive clusters, ascending.
pub fn select_predictive(scores: &[f64], rule: SelectionRule) -> Result<Vec<usize>> {
    rule.validate()?;
    let n = scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    match rule {
        SelectionRule::MeanPlusSd { k } => {
            let mu = scores.iter().sum::<f64>() / n as f64;
            let var = scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n as f64;
            let sigma = var.sqrt();
            if sigma == 0.0 {
                return Ok(Vec::new());
            }
            let threshold = mu + k * sigma;
            Ok((0..n).filter(|&c| scores[c] > threshold).collect())
        }
        SelectionRule::TopPercent { q } => {
            let take = ((q / 100.0 * n as f64).ceil() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut chosen = order[..take].to_vec();
            chosen.sort_unstable();
            Ok(chosen)
        }
    }
}

/// Sorted, deduplicated names of the tracts containing `clusters`.
pub fn map_to_tracts(clusters: &[usize], tracts: &TractMap) -> Result<Vec<String>> {
    let mut names = BTreeSet::new();
    for &c in clusters {
        let name = tracts
            .tract_of(c)
            .ok_or_else(|| Error::input(format!("cluster {c} is not in the tract map")))?;
        names.insert(name.to_string());
    }
    Ok(names.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub config_digest: String,
    pub seed: u64,
    pub mean_attention: Vec<f64>,
    pub rule: String,
    /// How the selection threshold was chosen.
    pub rule_note: String,
    pub predictive_clusters: Vec<usize>,
    pub predictive_tracts: Vec<String>,
    pub n_contributing: usize,
    pub n_subjects: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_weights: Option<FusionSummary>,
}

const RULE_NOTE: &str = "reconstructed cut: there is no canonical predictive-cluster threshold; \
                         mean+k·sd uses the population sd over clusters";

/// Aggregate a run's attention dumps into a report.
pub fn build_report(results: &RunResults, tracts: &TractMap, rule: SelectionRule) -> Result<AttentionReport> {
    if !results.has_attention() {
        return Err(Error::config(
            "results carry no attention scores (model trained without attention)",
        ));
    }
    let scores: Vec<&[f64]> = results
        .subjects
        .iter()
        .map(|s| s.attention.as_deref().expect("checked above"))
        .collect();
    let correct: Vec<bool> = results.subjects.iter().map(|s| s.correct).collect();
    let (mean_attention, n_contributing) = aggregate_attention(&scores, &correct)?;
    let predictive_clusters = select_predictive(&mean_attention, rule)?;
    let predictive_tracts = map_to_tracts(&predictive_clusters, tracts)?;
    Ok(AttentionReport {
        config_digest: results.config_digest.clone(),
        seed: results.seed,
        mean_attention,
        rule: rule.name(),
        rule_note: RULE_NOTE.to_string(),
        predictive_clusters,
        predictive_tracts,
        n_contributing,
        n_subjects: results.subjects.len(),
        fusion_weights: results.fusion_weights.clone(),
    })
}

/// Fixed-width plain-text rendering of a report.
pub fn render_text(report: &AttentionReport, tracts: Option<&TractMap>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_digest={} seed={}", report.config_digest, report.seed);
    let _ = writeln!(out, "rule: {} ({})", report.rule, report.rule_note);
    let _ = writeln!(
        out,
        "contributing subjects: {} of {}",
        report.n_contributing, report.n_subjects
    );
    match &report.fusion_weights {
        Some(f) => {
            let _ = writeln!(out, "fusion weights raw:        w1={:>10.6} w2={:>10.6}", f.raw[0], f.raw[1]);
            match f.normalized {
                Some(n) => {
                    let _ = writeln!(out, "fusion weights normalized: w1={:>10.6} w2={:>10.6}", n[0], n[1]);
                }
                None => {
                    let _ = writeln!(out, "fusion weights normalized: undefined (w1 + w2 = 0)");
                }
            }
        }
        None => {
            let _ = writeln!(out, "fusion weights: n/a (single stream)");
        }
    }
    out.push('\n');
    let _ = writeln!(out, "{:>8}  {:>14}  {:>10}  {}", "cluster", "mean_attention", "predictive", "tract");
    let chosen: BTreeSet<usize> = report.predictive_clusters.iter().copied().collect();
    for (c, score) in report.mean_attention.iter().enumerate() {
        let tract = tracts.and_then(|t| t.tract_of(c)).unwrap_or("-");
        let flag = if chosen.contains(&c) { "yes" } else { "no" };
        let _ = writeln!(out, "{c:>8}  {score:>14.6}  {flag:>10}  {tract}");
    }
    out.push('\n');
    if report.predictive_tracts.is_empty() {
        let _ = writeln!(out, "predictive tracts: none selected");
    } else {
        let _ = writeln!(out, "predictive tracts: {}", report.predictive_tracts.join(", "));
    }
    out
}

/// Write `report.json` and `report.txt` under `dir`.
pub fn emit_report(report: &AttentionReport, tracts: Option<&TractMap>, dir: &Path) -> Result<[PathBuf; 2]> {
    let json = dir.join("report.json");
    let text = dir.join("report.txt");
    io::write_json(&json, report)?;
    io::write_text(&text, &render_text(report, tracts))?;
    Ok([json, text])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(usize, &str)]) -> TractMap {
        TractMap::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (c, n))| TractEntry {
                    cluster_id: *c,
                    tract_id: i,
                    tract_name: n.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let a = [0.2, 0.8];
        let b = [0.4, 0.6];
        let (m, n) = aggregate_attention(&[&a, &b], &[true, true]).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.7).abs() < 1e-15);
        assert_eq!(n, 2);
        let (m, n) = aggregate_attention(&[&a, &b], &[false, true]).unwrap();
        assert_eq!((m, n), (b.to_vec(), 1));
        assert!(aggregate_attention(&[&a], &[false]).is_err());
    }

    #[test]
    fn selection_examples() {
        assert!(select_predictive(&[0.4; 10], SelectionRule::default()).unwrap().is_empty());
        let mut s = vec![0.1; 32];
        s[5] = 0.9;
        assert_eq!(select_predictive(&s, SelectionRule::default()).unwrap(), vec![5]);
        assert_eq!(
            select_predictive(&s, SelectionRule::TopPercent { q: 100.0 }).unwrap(),
            (0..32).collect::<Vec<_>>()
        );
        assert_eq!(select_predictive(&s, SelectionRule::TopPercent { q: 5.0 }).unwrap(), vec![0, 5]);
        assert_eq!(SelectionRule::default().name(), "mean+1.5sd");
        assert_eq!(SelectionRule::TopPercent { q: 5.0 }.name(), "top5pct");
    }

    #[test]
    fn tract_mapping_examples() {
        let t = map(&[(3, "A"), (7, "A"), (1, "B")]);
        assert_eq!(map_to_tracts(&[3, 7], &t).unwrap(), vec!["A"]);
        assert!(map_to_tracts(&[], &t).unwrap().is_empty());
        assert_eq!(map_to_tracts(&[1, 3], &t).unwrap(), vec!["A", "B"]);
        let err = map_to_tracts(&[9], &t).unwrap_err();
        assert!(err.to_string().contains("cluster 9"));
    }

    #[test]
    fn tract_csv_round_trip() {
        let t = map(&[(0, "arcuate"), (1, "cingulum")]);
        let text = t.to_csv(Some("seed=1")).unwrap();
        assert!(text.contains("cluster_id,tract_id,tract_name"));
        assert_eq!(TractMap::parse_csv(&text, Path::new("t.csv")).unwrap(), t);
    }

    #[test]
    fn text_report_marks_empty_selection() {
        let r = AttentionReport {
            config_digest: "d".into(),
            seed: 1,
            mean_attention: vec![0.5, 0.5],
            rule: "mean+1.5sd".into(),
            rule_note: RULE_NOTE.into(),
            predictive_clusters: vec![],
            predictive_tracts: vec![],
            n_contributing: 2,
            n_subjects: 2,
            fusion_weights: Some(FusionSummary {
                raw: [0.57, 0.35],
                normalized: Some([0.57 / 0.92, 0.35 / 0.92]),
            }),
        };
        let text = render_text(&r, None);
        assert!(text.contains("none selected"));
        assert!(text.contains("w1=  0.619565"));
    }
}
