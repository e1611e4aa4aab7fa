//! Streamlines, equal-count resampling, fiber distances and cluster-pair
//! distance matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub type Point3 = [f64; 3];

/// Resampled points per streamline used when none is configured.
pub const DEFAULT_POINTS: usize = 15;

/// An ordered polyline in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point3>", into = "Vec<Point3>")]
pub struct Streamline {
    points: Vec<Point3>,
}

impl TryFrom<Vec<Point3>> for Streamline {
    type Error = Error;

    fn try_from(points: Vec<Point3>) -> Result<Self> {
        Streamline::new(points)
    }
}

impl From<Streamline> for Vec<Point3> {
    fn from(s: Streamline) -> Self {
        s.points
    }
}

fn dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl Streamline {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::input(format!(
                "streamline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("streamline has a non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn translated(&self, v: Point3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
                .collect(),
        }
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
    }
}

/// Resample `s` to `count` points equally spaced by arc length; the
/// endpoints are kept exactly.
pub fn resample_streamline(s: &Streamline, count: usize) -> Result<Streamline> {
    if count < 2 {
        return Err(Error::config(format!("resampling needs at least 2 points, got {count}")));
    }
    // Each half is walked from its own end so that resampling commutes
    // exactly with reversal.
    let fwd = s.points();
    let rev: Vec<Point3> = fwd.iter().rev().copied().collect();
    let fwd_cum = cumulative_lengths(fwd);
    let rev_cum = cumulative_lengths(&rev);
    let last = count - 1;
    let out = (0..count)
        .map(|k| {
            if 2 * k < last {
                point_at(fwd, &fwd_cum, k, last)
            } else if 2 * k > last {
                point_at(&rev, &rev_cum, last - k, last)
            } else {
                let (a, b) = (point_at(fwd, &fwd_cum, k, last), point_at(&rev, &rev_cum, k, last));
                [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]
            }
        })
        .collect();
    Ok(Streamline { points: out })
}

fn cumulative_lengths(pts: &[Point3]) -> Vec<f64> {
    let mut cumulative = Vec::with_capacity(pts.len());
    cumulative.push(0.0);
    for w in pts.windows(2) {
        let last = *cumulative.last().expect("non-empty");
        cumulative.push(last + dist(&w[0], &w[1]));
    }
    cumulative
}

/// Point at arc-length fraction `k / last` measured from `pts[0]`.
fn point_at(pts: &[Point3], cumulative: &[f64], k: usize, last: usize) -> Point3 {
    if k == 0 {
        return pts[0];
    }
    if k == last {
        return pts[pts.len() - 1];
    }
    let target = cumulative[pts.len() - 1] * k as f64 / last as f64;
    let seg = cumulative[1..]
        .iter()
        .position(|&c| c >= target)
        .unwrap_or(pts.len() - 2)
        .min(pts.len() - 2);
    let len = cumulative[seg + 1] - cumulative[seg];
    let t = if len > 0.0 {
        ((target - cumulative[seg]) / len).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (a, b) = (pts[seg], pts[seg + 1]);
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

/// Sum of `terms` accumulated symmetrically from both ends, so the reversed
/// sequence yields a bitwise identical result.
fn palindromic_sum(terms: impl Fn(usize) -> f64, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n / 2 {
        total += terms(i) + terms(n - 1 - i);
    }
    if n % 2 == 1 {
        total += terms(n / 2);
    }
    total
}

/// Minimum direct-flip distance between two streamlines already resampled
/// to the same point count.
fn mdf_resampled(a: &[Point3], b: &[Point3]) -> f64 {
    let n = a.len();
    let direct = palindromic_sum(|i| dist(&a[i], &b[i]), n);
    let flipped = palindromic_sum(|i| dist(&a[i], &b[n - 1 - i]), n);
    direct.min(flipped) / n as f64
}

/// Symmetric mean-closest-point distance between two point sets.
fn mcp_resampled(a: &[Point3], b: &[Point3]) -> f64 {
    let directed = |from: &[Point3], to: &[Point3]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    let ab = directed(a, b);
    let ba = directed(b, a);
    // min/max ordering keeps the result independent of argument order
    (ab.min(ba) + ab.max(ba)) / 2.0
}

/// Minimum direct-flip distance: the smaller of the mean pointwise distance
/// under direct and reversed correspondence, after resampling both
/// streamlines to `points` points.
pub fn mdf_distance(a: &Streamline, b: &Streamline, points: usize) -> Result<f64> {
    let ra = resample_streamline(a, points)?;
    let rb = resample_streamline(b, points)?;
    Ok(mdf_resampled(ra.points(), rb.points()))
}

/// Symmetric mean-closest-point distance after resampling to `points` points.
pub fn mean_closest_point_distance(a: &Streamline, b: &Streamline, points: usize) -> Result<f64> {
    let ra = resample_streamline(a, points)?;
    let rb = resample_streamline(b, points)?;
    Ok(mcp_resampled(ra.points(), rb.points()))
}

/// Streamline-to-streamline distance used for cluster geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FiberMetric {
    #[default]
    #[serde(rename = "mdf")]
    MinimumDirectFlip,
    #[serde(rename = "mcp")]
    MeanClosestPoint,
}

impl FiberMetric {
    pub fn tag(self) -> &'static str {
        match self {
            FiberMetric::MinimumDirectFlip => "mdf",
            FiberMetric::MeanClosestPoint => "mcp",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "mdf" => Ok(FiberMetric::MinimumDirectFlip),
            "mcp" => Ok(FiberMetric::MeanClosestPoint),
            other => Err(Error::config(format!("unknown fiber metric `{other}` (mdf|mcp)"))),
        }
    }

    fn between(self, a: &[Point3], b: &[Point3]) -> f64 {
        match self {
            FiberMetric::MinimumDirectFlip => mdf_resampled(a, b),
            FiberMetric::MeanClosestPoint => mcp_resampled(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberCluster {
    pub cluster_id: usize,
    pub streamlines: Vec<Streamline>,
}

impl FiberCluster {
    pub fn new(cluster_id: usize, streamlines: Vec<Streamline>) -> Result<Self> {
        if streamlines.is_empty() {
            return Err(Error::input(format!("cluster {cluster_id} has no streamlines")));
        }
        Ok(Self {
            cluster_id,
            streamlines,
        })
    }

    fn resampled(&self, points: usize) -> Result<Vec<Vec<Point3>>> {
        self.streamlines
            .iter()
            .map(|s| resample_streamline(s, points).map(|r| r.points))
            .collect()
    }
}

fn mean_pairwise(a: &[Vec<Point3>], b: &[Vec<Point3>], metric: FiberMetric) -> f64 {
    let mut total = 0.0;
    for sa in a {
        for sb in b {
            total += metric.between(sa, sb);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Mean fiber distance over all streamline pairs of two clusters.
///
/// The lower cluster id is always iterated first, so the result does not
/// depend on argument order.
pub fn cluster_pair_distance(
    a: &FiberCluster,
    b: &FiberCluster,
    points: usize,
    metric: FiberMetric,
) -> Result<f64> {
    let (a, b) = if b.cluster_id < a.cluster_id { (b, a) } else { (a, b) };
    if a.streamlines.is_empty() || b.streamlines.is_empty() {
        return Err(Error::input("cluster_pair_distance on an empty cluster"));
    }
    Ok(mean_pairwise(&a.resampled(points)?, &b.resampled(points)?, metric))
}

/// Symmetric N×N matrix of cluster distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::input(format!("distance matrix needs N ≥ 2, got {n}")));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::input(format!(
                "distance matrix row {r} has {} columns, expected {n}",
                rows[r].len()
            )));
        }
        let m = Self {
            n,
            values: rows.concat(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::input(format!("distance matrix diagonal ({i},{i}) is not zero")));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::input(format!("distance ({i},{j}) = {v} is invalid")));
                }
                if v != self.get(j, i) {
                    return Err(Error::input(format!("distance matrix is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Apply `f` to every entry (used for monotone rescaling checks).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let rows = (0..self.n)
            .map(|i| {
                (0..self.n)
                    .map(|j| if i == j { 0.0 } else { f(self.get(i, j)) })
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Headerless CSV, one row per line. Lines starting with `#` carry
    /// metadata and are ignored on load.
    pub fn to_csv(&self, header_comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = header_comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        for i in 0..self.n {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| {
                        Error::input(format!("distance matrix line {}: `{f}`: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_csv(&io::read_text(path)?)
    }
}

/// Pairwise cluster distance matrix; row i corresponds to `clusters[i]`.
pub fn distance_matrix(
    clusters: &[FiberCluster],
    points: usize,
    metric: FiberMetric,
) -> Result<DistanceMatrix> {
    let n = clusters.len();
    if n < 2 {
        return Err(Error::input(format!("distance matrix needs N ≥ 2, got {n}")));
    }
    let resampled = clusters
        .iter()
        .map(|c| {
            if c.streamlines.is_empty() {
                Err(Error::input(format!("cluster {} has no streamlines", c.cluster_id)))
            } else {
                c.resampled(points)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let (lo, hi) = if clusters[j].cluster_id < clusters[i].cluster_id {
                (j, i)
            } else {
                (i, j)
            };
            let d = mean_pairwise(&resampled[lo], &resampled[hi], metric);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

/// On-disk atlas geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub clusters: Vec<FiberCluster>,
}

impl AtlasFile {
    /// Clusters ordered by id; ids must be exactly `0..N`.
    pub fn into_ordered_clusters(mut self) -> Result<Vec<FiberCluster>> {
        self.clusters.sort_by_key(|c| c.cluster_id);
        for (i, c) in self.clusters.iter().enumerate() {
            if c.cluster_id != i {
                return Err(Error::input(format!(
                    "atlas cluster ids must be 0..{} without gaps or duplicates; found {} at position {i}",
                    self.clusters.len(),
                    c.cluster_id
                )));
            }
            if c.streamlines.is_empty() {
                return Err(Error::input(format!("atlas cluster {i} has no streamlines")));
            }
        }
        Ok(self.clusters)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}
