//! Per-subject cluster feature matrices (FA, MD, PoS) and min–max
//! normalization fitted on training subjects.
//!
//! The third channel is the proportion of streamlines (PoS): each cluster's
//! streamline count divided by the subject's total. Raw counts never reach
//! the model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const N_CHANNELS: usize = 3;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = ["fa", "md", "pos"];

/// One measured cluster of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: usize,
    pub fa: f64,
    /// Mean diffusivity in mm²/s.
    pub md: f64,
    /// Number of streamlines.
    pub nos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub label: usize,
    /// N rows of `[fa, md, pos]`; absent clusters are all-zero rows.
    pub features: Vec<[f64; N_CHANNELS]>,
    pub present: Vec<bool>,
    pub normalized: bool,
}

impl SubjectFeatures {
    pub fn n_clusters(&self) -> usize {
        self.features.len()
    }

    /// Row-major N×3 buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.features.iter().flatten().copied().collect()
    }
}

/// Streamline proportions `nos[c] / Σ nos`.
pub fn compute_pos(nos: &[f64]) -> Result<Vec<f64>> {
    if let Some(c) = nos.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::input(format!("cluster {c}: streamline count {} is invalid", nos[c])));
    }
    let total: f64 = nos.iter().sum();
    if total <= 0.0 {
        return Err(Error::input("all streamline counts are zero; subject rejected"));
    }
    Ok(nos.iter().map(|v| v / total).collect())
}

/// Build one subject's N×3 matrix; clusters without a record are zero-filled
/// and marked absent.
pub fn assemble_subject(
    records: &[ClusterRecord],
    n_clusters: usize,
    subject_id: &str,
    label: usize,
) -> Result<SubjectFeatures> {
    if label > 1 {
        return Err(Error::input(format!("subject {subject_id}: label {label} is not 0 or 1")));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.cluster_id);
    for w in sorted.windows(2) {
        if w[0].cluster_id == w[1].cluster_id {
            return Err(Error::input(format!(
                "subject {subject_id}: duplicate record for cluster {}",
                w[0].cluster_id
            )));
        }
    }
    if let Some(r) = sorted.iter().find(|r| r.cluster_id >= n_clusters) {
        return Err(Error::input(format!(
            "subject {subject_id}: cluster {} outside [0, {n_clusters})",
            r.cluster_id
        )));
    }
    if let Some(r) = sorted.iter().find(|r| !r.fa.is_finite() || !r.md.is_finite()) {
        return Err(Error::input(format!(
            "subject {subject_id}: non-finite feature in cluster {}",
            r.cluster_id
        )));
    }
    let nos: Vec<f64> = sorted.iter().map(|r| r.nos).collect();
    let pos = compute_pos(&nos).map_err(|e| Error::input(format!("subject {subject_id}: {e}")))?;
    let mut features = vec![[0.0; N_CHANNELS]; n_clusters];
    let mut present = vec![false; n_clusters];
    for (r, p) in sorted.iter().zip(pos) {
        features[r.cluster_id] = [r.fa, r.md, p];
        present[r.cluster_id] = true;
    }
    Ok(SubjectFeatures {
        subject_id: subject_id.to_string(),
        label,
        features,
        present,
        normalized: false,
    })
}

/// Per-channel min and max over the present clusters of training subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: [f64; N_CHANNELS],
    pub max: [f64; N_CHANNELS],
}

impl NormalizationParams {
    /// Channels whose fitted range is empty (max == min).
    pub fn degenerate_channels(&self) -> Vec<usize> {
        (0..N_CHANNELS).filter(|&c| self.max[c] == self.min[c]).collect()
    }
}

/// Fit min–max ranges; zeros of absent clusters are excluded.
pub fn fit_minmax<'a>(training: impl IntoIterator<Item = &'a SubjectFeatures>) -> Result<NormalizationParams> {
    let mut min = [f64::INFINITY; N_CHANNELS];
    let mut max = [f64::NEG_INFINITY; N_CHANNELS];
    let mut subjects = 0;
    for s in training {
        subjects += 1;
        for (row, &p) in s.features.iter().zip(&s.present) {
            if p {
                for c in 0..N_CHANNELS {
                    min[c] = min[c].min(row[c]);
                    max[c] = max[c].max(row[c]);
                }
            }
        }
    }
    if subjects == 0 {
        return Err(Error::input("cannot fit normalization on an empty cohort"));
    }
    if min.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cannot fit normalization: no present clusters"));
    }
    Ok(NormalizationParams { min, max })
}

/// Map present entries to `(v − min)/(max − min)` clamped to [0, 1];
/// degenerate channels map to 0 and absent rows stay zero.
pub fn apply_minmax(subject: &SubjectFeatures, params: &NormalizationParams) -> SubjectFeatures {
    let mut out = subject.clone();
    for (row, &p) in out.features.iter_mut().zip(&subject.present) {
        if !p {
            *row = [0.0; N_CHANNELS];
            continue;
        }
        for c in 0..N_CHANNELS {
            let span = params.max[c] - params.min[c];
            row[c] = if span > 0.0 {
                ((row[c] - params.min[c]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out.normalized = true;
    out
}

/// Subjects sharing one cluster count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub n_clusters: usize,
    pub subjects: Vec<SubjectFeatures>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CohortRow {
    subject_id: String,
    label: usize,
    cluster_id: usize,
    fa: f64,
    md: f64,
    nos: f64,
}

impl Cohort {
    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Parse the long-format cohort CSV
    /// (`subject_id,label,cluster_id,fa,md,nos`).
    ///
    /// N comes from `n_clusters`, else an `n_clusters=` metadata comment,
    /// else the largest cluster id + 1. Subjects keep first-appearance order.
    pub fn parse_csv(text: &str, n_clusters: Option<usize>, path: &Path) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: BTreeMap<String, (usize, Vec<ClusterRecord>)> = BTreeMap::new();
        let mut max_id = 0;
        for rec in io::csv_reader(text).deserialize::<CohortRow>() {
            let row = rec.map_err(|e| io::csv_error(path, e))?;
            max_id = max_id.max(row.cluster_id + 1);
            let entry = grouped.entry(row.subject_id.clone()).or_insert_with(|| {
                order.push(row.subject_id.clone());
                (row.label, Vec::new())
            });
            if entry.0 != row.label {
                return Err(Error::input(format!(
                    "subject {} has conflicting labels {} and {}",
                    row.subject_id, entry.0, row.label
                )));
            }
            entry.1.push(ClusterRecord {
                cluster_id: row.cluster_id,
                fa: row.fa,
                md: row.md,
                nos: row.nos,
            });
        }
        let from_meta = io::csv_metadata(text)
            .into_iter()
            .find(|(k, _)| k == "n_clusters")
            .and_then(|(_, v)| v.parse().ok());
        let n = n_clusters.or(from_meta).unwrap_or(max_id);
        let subjects = order
            .iter()
            .map(|id| {
                let (label, recs) = &grouped[id];
                assemble_subject(recs, n, id, *label)
            })
            .collect::<Result<Vec<_>>>()?;
        if subjects.is_empty() {
            return Err(Error::input(format!("{}: cohort has no subjects", path.display())));
        }
        Ok(Self {
            n_clusters: n,
            subjects,
        })
    }

    pub fn load(path: &Path, n_clusters: Option<usize>) -> Result<Self> {
        Self::parse_csv(&io::read_text(path)?, n_clusters, path)
    }
}

/// Serialize raw per-subject records in the long cohort format.
pub fn cohort_csv(
    subjects: &[(String, usize, Vec<ClusterRecord>)],
    comment: Option<&str>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, label, records) in subjects {
        for r in records {
            w.serialize(CohortRow {
                subject_id: id.clone(),
                label: *label,
                cluster_id: r.cluster_id,
                fa: r.fa,
                md: r.md,
                nos: r.nos,
            })
            .map_err(|e| Error::input(e.to_string()))?;
        }
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::input(e.to_string()))?)
        .expect("csv is utf-8");
    Ok(comment.map(|c| format!("# {c}\n")).unwrap_or_default() + &body)
}
