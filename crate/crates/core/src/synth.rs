//! Seeded synthetic atlas (bundled streamlines, region overlaps, tract map)
//! and labeled cohorts with a planted class effect on chosen clusters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ClusterRecord, Cohort, assemble_subject};
use crate::geometry::{mdf_distance, AtlasFile, FiberCluster, Point3, Streamline};
use crate::graph::{RegionId, RegionOverlapTable};
use crate::interpret::{TractEntry, TractMap};

/// FA clamp range (unitless).
pub const FA_RANGE: (f64, f64) = (0.05, 0.95);
/// MD clamp range in mm²/s.
pub const MD_RANGE: (f64, f64) = (1e-4, 3e-3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticAtlasConfig {
    pub n_clusters: usize,
    pub streamlines_per_cluster: usize,
    pub points_per_streamline: usize,
    pub bundle_jitter_mm: f64,
    pub n_regions: usize,
    pub n_tracts: usize,
    /// Edge of the cube holding all geometry, in mm.
    pub extent_mm: f64,
    /// Spread (sd, mm) of each cluster's control points around the anchor
    /// curve of its family; one family per tract.
    pub family_spread_mm: f64,
    pub seed: u64,
}

impl Default for SyntheticAtlasConfig {
    fn default() -> Self {
        Self {
            n_clusters: 64,
            streamlines_per_cluster: 6,
            points_per_streamline: 20,
            bundle_jitter_mm: 2.0,
            n_regions: 12,
            n_tracts: 8,
            extent_mm: 120.0,
            family_spread_mm: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticAtlasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 || self.n_regions < 2 || self.n_tracts < 1 || self.n_tracts > self.n_clusters {
            return Err(Error::config(format!(
                "atlas needs N ≥ 2, R ≥ 2 and 1 ≤ T ≤ N (got N = {}, R = {}, T = {})",
                self.n_clusters, self.n_regions, self.n_tracts
            )));
        }
        if self.streamlines_per_cluster == 0 || self.points_per_streamline < 2 {
            return Err(Error::config("clusters need ≥ 1 streamline of ≥ 2 points"));
        }
        if !(self.bundle_jitter_mm >= 0.0 && self.family_spread_mm >= 0.0 && self.extent_mm > 0.0) {
            return Err(Error::config("jitter and spread must be ≥ 0 and extent > 0"));
        }
        Ok(())
    }
}

/// Geometry, region overlaps and tract assignment of a synthetic atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasDescriptor {
    pub atlas: AtlasFile,
    pub centroids: Vec<Streamline>,
    pub overlaps: RegionOverlapTable,
    pub tracts: TractMap,
}

fn bezier(p: &[Point3; 3], t: f64) -> Point3 {
    let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * (1.0 - t) * t, t * t);
    [
        a * p[0][0] + b * p[1][0] + c * p[2][0],
        a * p[0][1] + b * p[1][1] + c * p[2][1],
        a * p[0][2] + b * p[1][2] + c * p[2][2],
    ]
}

fn nearest(p: &Point3, centers: &[Point3]) -> usize {
    let d2 = |c: &Point3| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>();
    (0..centers.len())
        .min_by(|&a, &b| d2(&centers[a]).total_cmp(&d2(&centers[b])).then(a.cmp(&b)))
        .expect("at least one center")
}

/// Generate an atlas: each cluster is a bundle of jittered copies of a
/// random quadratic Bézier centroid (some stored reversed) whose control
/// points scatter around one of T random anchor curves; overlaps count
/// streamline endpoints by nearest region centre; tracts group clusters by
/// centroid proximity to T seed clusters.
pub fn gen_atlas(config: &SyntheticAtlasConfig) -> Result<AtlasDescriptor> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e = config.extent_mm;
    let point = |rng: &mut ChaCha8Rng| -> Point3 { [rng.random_range(0.0..e), rng.random_range(0.0..e), rng.random_range(0.0..e)] };
    let regions: Vec<Point3> = (0..config.n_regions).map(|_| point(&mut rng)).collect();
    let p = config.points_per_streamline;
    let ts: Vec<f64> = (0..p).map(|i| i as f64 / (p - 1) as f64).collect();
    let jitter = Normal::new(0.0, config.bundle_jitter_mm.max(f64::MIN_POSITIVE)).expect("valid sd");
    let jitter_on = config.bundle_jitter_mm > 0.0;
    let spread = Normal::new(0.0, config.family_spread_mm.max(f64::MIN_POSITIVE)).expect("valid sd");
    let anchors: Vec<[Point3; 3]> = (0..config.n_tracts)
        .map(|_| [point(&mut rng), point(&mut rng), point(&mut rng)])
        .collect();

    let mut clusters = Vec::with_capacity(config.n_clusters);
    let mut centroids = Vec::with_capacity(config.n_clusters);
    let mut overlap_rows = Vec::with_capacity(config.n_clusters);
    for c in 0..config.n_clusters {
        let anchor = anchors[rng.random_range(0..anchors.len())];
        let control = anchor.map(|q| {
            q.map(|v| {
                let d = if config.family_spread_mm > 0.0 { spread.sample(&mut rng) } else { 0.0 };
                (v + d).clamp(0.0, e)
            })
        });
        let centroid: Vec<Point3> = ts.iter().map(|&t| bezier(&control, t)).collect();
        let mut streamlines = Vec::with_capacity(config.streamlines_per_cluster);
        let mut endpoint_counts = vec![0usize; config.n_regions];
        for _ in 0..config.streamlines_per_cluster {
            let offset: Point3 = if jitter_on {
                [jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng)]
            } else {
                [0.0; 3]
            };
            let mut pts: Vec<Point3> = centroid
                .iter()
                .map(|q| {
                    let mut out = [q[0] + offset[0], q[1] + offset[1], q[2] + offset[2]];
                    if jitter_on {
                        for v in &mut out {
                            *v += 0.25 * jitter.sample(&mut rng);
                        }
                    }
                    out
                })
                .collect();
            if rng.random_bool(0.5) {
                pts.reverse();
            }
            endpoint_counts[nearest(&pts[0], &regions)] += 1;
            endpoint_counts[nearest(&pts[p - 1], &regions)] += 1;
            streamlines.push(Streamline::new(pts)?);
        }
        let total = (2 * config.streamlines_per_cluster) as f64;
        overlap_rows.push(
            endpoint_counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(r, &n)| (r as RegionId, 100.0 * n as f64 / total))
                .collect(),
        );
        clusters.push(FiberCluster::new(c, streamlines)?);
        centroids.push(Streamline::new(centroid)?);
    }

    let mut seeds: Vec<usize> = (0..config.n_clusters).collect();
    seeds.shuffle(&mut rng);
    seeds.truncate(config.n_tracts);
    seeds.sort_unstable();
    let mut entries = Vec::with_capacity(config.n_clusters);
    for (c, centroid) in centroids.iter().enumerate() {
        let tract = match seeds.iter().position(|&s| s == c) {
            Some(t) => t,
            None => {
                let d = seeds
                    .iter()
                    .map(|&s| mdf_distance(centroid, &centroids[s], p))
                    .collect::<Result<Vec<_>>>()?;
                (0..d.len())
                    .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)))
                    .expect("T ≥ 1")
            }
        };
        entries.push(TractEntry {
            cluster_id: c,
            tract_id: tract,
            tract_name: format!("tract_{tract:02}"),
        });
    }
    Ok(AtlasDescriptor {
        atlas: AtlasFile {
            config_digest: None,
            seed: Some(config.seed),
            clusters,
        },
        centroids,
        overlaps: RegionOverlapTable::new(overlap_rows)?,
        tracts: TractMap::new(entries)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCohortConfig {
    pub n_subjects: usize,
    /// Explicit planted clusters; when empty, `n_planted` are drawn.
    pub planted_clusters: Vec<usize>,
    pub n_planted: usize,
    /// Draw the planted set as one cluster plus its nearest neighbours by
    /// centroid distance instead of uniformly.
    pub connected_planting: bool,
    /// Class-1 shift per channel: FA, MD (mm²/s), streamline-count rate.
    pub delta: [f64; 3],
    /// Gaussian noise sd per channel; for counts it perturbs the Poisson rate.
    pub noise_sd: [f64; 3],
    pub p_absent: f64,
    /// Per-cluster `[fa, md, count_rate]` means; drawn when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_means: Option<Vec<[f64; 3]>>,
    pub seed: u64,
}

impl Default for SyntheticCohortConfig {
    fn default() -> Self {
        let noise_sd = [0.03, 4e-5, 15.0];
        Self {
            n_subjects: 400,
            planted_clusters: Vec::new(),
            n_planted: 8,
            connected_planting: false,
            delta: noise_sd.map(|s| 2.0 * s),
            noise_sd,
            p_absent: 0.0,
            base_means: None,
            seed: 1,
        }
    }
}

impl SyntheticCohortConfig {
    /// Set every channel's shift to `multiple` noise standard deviations.
    pub fn with_effect_in_sd(mut self, multiple: f64) -> Self {
        self.delta = self.noise_sd.map(|s| multiple * s);
        self
    }

    pub fn validate(&self, n_clusters: usize) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::config("cohort needs at least 2 subjects"));
        }
        if !(0.0..1.0).contains(&self.p_absent) {
            return Err(Error::config(format!("p_absent must be in [0, 1), got {}", self.p_absent)));
        }
        if self.delta.iter().chain(&self.noise_sd).any(|v| !v.is_finite()) || self.noise_sd.iter().any(|s| *s < 0.0) {
            return Err(Error::config("delta must be finite and noise_sd finite and non-negative"));
        }
        if self.planted_clusters.is_empty() && (self.n_planted == 0 || self.n_planted > n_clusters) {
            return Err(Error::config(format!(
                "n_planted must be in [1, {n_clusters}], got {}",
                self.n_planted
            )));
        }
        if let Some(c) = self.planted_clusters.iter().find(|&&c| c >= n_clusters) {
            return Err(Error::config(format!("planted cluster {c} outside [0, {n_clusters})")));
        }
        if let Some(b) = &self.base_means {
            if b.len() != n_clusters {
                return Err(Error::config(format!(
                    "base_means has {} rows for {n_clusters} clusters",
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

/// Planted clusters and seeds behind a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_clusters: Vec<usize>,
    pub delta: [f64; 3],
    pub noise_sd: [f64; 3],
    pub atlas_seed: Option<u64>,
    pub cohort_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Raw per-subject records, as written to the cohort CSV.
pub type SubjectRecords = (String, usize, Vec<ClusterRecord>);

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub records: Vec<SubjectRecords>,
    pub cohort: Cohort,
    pub truth: GroundTruth,
}

fn choose_planted(atlas: &AtlasDescriptor, config: &SyntheticCohortConfig, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = atlas.centroids.len();
    if !config.planted_clusters.is_empty() {
        let mut p = config.planted_clusters.clone();
        p.sort_unstable();
        p.dedup();
        return Ok(p);
    }
    let mut planted = if config.connected_planting {
        let anchor = rng.random_range(0..n);
        let p = atlas.centroids[anchor].len();
        let d = atlas
            .centroids
            .iter()
            .map(|c| mdf_distance(&atlas.centroids[anchor], c, p))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        order.truncate(config.n_planted);
        order
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        all.truncate(config.n_planted);
        all
    };
    planted.sort_unstable();
    Ok(planted)
}

/// Generate a labeled cohort: balanced labels, additive class shift on the
/// planted clusters, Gaussian FA/MD noise with physiological clamps and
/// Poisson streamline counts; each (subject, cluster) is dropped with
/// probability `p_absent`.
pub fn gen_cohort(atlas: &AtlasDescriptor, config: &SyntheticCohortConfig) -> Result<SyntheticCohort> {
    let n = atlas.centroids.len();
    config.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let planted = choose_planted(atlas, config, &mut rng)?;
    let base: Vec<[f64; 3]> = match &config.base_means {
        Some(b) => b.clone(),
        None => (0..n)
            .map(|_| {
                [
                    rng.random_range(0.35..0.65),
                    rng.random_range(6.5e-4..9.5e-4),
                    rng.random_range(80.0..220.0),
                ]
            })
            .collect(),
    };
    let mut labels: Vec<usize> = (0..config.n_subjects).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let is_planted: Vec<bool> = (0..n).map(|c| planted.binary_search(&c).is_ok()).collect();
    let normal = |sd: f64| Normal::new(0.0, sd).expect("finite sd");
    let noise = config.noise_sd.map(normal);
    let width = config.n_subjects.to_string().len();

    let mut records = Vec::with_capacity(config.n_subjects);
    for (s, &label) in labels.iter().enumerate() {
        let mut recs = Vec::with_capacity(n);
        for c in 0..n {
            let shift = if label == 1 && is_planted[c] { 1.0 } else { 0.0 };
            let fa = (base[c][0] + shift * config.delta[0] + noise[0].sample(&mut rng)).clamp(FA_RANGE.0, FA_RANGE.1);
            let md = (base[c][1] + shift * config.delta[1] + noise[1].sample(&mut rng)).clamp(MD_RANGE.0, MD_RANGE.1);
            let rate = (base[c][2] + shift * config.delta[2] + noise[2].sample(&mut rng)).max(0.5);
            let nos = Poisson::new(rate).expect("positive rate").sample(&mut rng);
            let absent = config.p_absent > 0.0 && rng.random_bool(config.p_absent);
            if !absent {
                recs.push(ClusterRecord { cluster_id: c, fa, md, nos });
            }
        }
        if recs.iter().all(|r| r.nos == 0.0) {
            // keep the subject valid: one cluster with one streamline
            recs.truncate(1);
            if recs.is_empty() {
                recs.push(ClusterRecord { cluster_id: 0, fa: base[0][0], md: base[0][1], nos: 1.0 });
            }
            recs[0].nos = 1.0;
        }
        records.push((format!("sub-{s:0width$}"), label, recs));
    }
    let subjects = records
        .iter()
        .map(|(id, label, recs)| assemble_subject(recs, n, id, *label))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCohort {
        records,
        cohort: Cohort { n_clusters: n, subjects },
        truth: GroundTruth {
            planted_clusters: planted,
            delta: config.delta,
            noise_sd: config.noise_sd,
            atlas_seed: atlas.atlas.seed,
            cohort_seed: config.seed,
            config_digest: None,
        },
    })
}
