//! White matter (WMG), gray matter (GMG) and combined (CMG) cluster graphs.
//!
//! * WMG: each node's `k` geometrically nearest clusters (directed).
//! * GMG: clusters whose top-two intersected cortical regions coincide.
//! * CMG: per-node intersection of the WMG and GMG neighborhoods.
//!
//! Ties are always broken by the lower index so construction is
//! deterministic.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::NeighborLists;
use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;
use crate::io;

/// Neighbor budget used when none is configured.
pub const DEFAULT_K: usize = 30;
/// Neighbor budgets of the k sweep.
pub const K_SWEEP: [usize; 5] = [10, 20, 30, 40, 50];

pub type RegionId = i64;

/// Per-cluster list of `(region_id, percent)` intersections.
///
/// Every cluster carries at least two entries; clusters that intersect fewer
/// real regions are padded with zero-percent sentinel regions whose negative
/// ids are unique to the cluster, so padding never creates shared regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionOverlapTable {
    clusters: Vec<Vec<(RegionId, f64)>>,
}

fn sentinel_region(cluster: usize, slot: usize) -> RegionId {
    -1 - (cluster as RegionId) * 2 - slot as RegionId
}

#[derive(Debug, Serialize, Deserialize)]
struct OverlapRow {
    cluster_id: usize,
    region_id: RegionId,
    percent: f64,
}

impl RegionOverlapTable {
    /// Validate and pad per-cluster entries.
    pub fn new(mut clusters: Vec<Vec<(RegionId, f64)>>) -> Result<Self> {
        for (c, entries) in clusters.iter_mut().enumerate() {
            let mut seen = BTreeSet::new();
            let mut total = 0.0;
            for &(r, p) in entries.iter() {
                if !(0.0..=100.0).contains(&p) {
                    return Err(Error::input(format!(
                        "cluster {c}: region {r} percent {p} outside [0, 100]"
                    )));
                }
                if !seen.insert(r) {
                    return Err(Error::input(format!("cluster {c}: region {r} listed twice")));
                }
                total += p;
            }
            if total > 100.0 + 1e-6 {
                return Err(Error::input(format!(
                    "cluster {c}: region percents sum to {total} > 100"
                )));
            }
            let mut slot = 0;
            while entries.len() < 2 {
                entries.push((sentinel_region(c, slot), 0.0));
                slot += 1;
            }
        }
        Ok(Self { clusters })
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn entries(&self, cluster: usize) -> &[(RegionId, f64)] {
        &self.clusters[cluster]
    }

    /// CSV rows `cluster_id,region_id,percent` (sentinels omitted).
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (c, entries) in self.clusters.iter().enumerate() {
            for &(region_id, percent) in entries {
                if region_id >= 0 {
                    w.serialize(OverlapRow {
                        cluster_id: c,
                        region_id,
                        percent,
                    })
                    .map_err(|e| Error::input(e.to_string()))?;
                }
            }
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::input(e.to_string()))?)
            .expect("csv is utf-8");
        Ok(comment.map(|c| format!("# {c}\n")).unwrap_or_default() + &body)
    }

    /// Parse CSV rows. `n_clusters` defaults to the `n_clusters=` metadata
    /// comment, else the largest cluster id + 1.
    pub fn parse_csv(text: &str, n_clusters: Option<usize>, path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in io::csv_reader(text).deserialize::<OverlapRow>() {
            rows.push(rec.map_err(|e| io::csv_error(path, e))?);
        }
        let from_meta = io::csv_metadata(text)
            .into_iter()
            .find(|(k, _)| k == "n_clusters")
            .and_then(|(_, v)| v.parse().ok());
        let n = n_clusters
            .or(from_meta)
            .unwrap_or_else(|| rows.iter().map(|r| r.cluster_id + 1).max().unwrap_or(0));
        let mut clusters = vec![Vec::new(); n];
        for r in rows {
            if r.region_id < 0 {
                return Err(Error::input(format!(
                    "{}: negative region id {} is reserved",
                    path.display(),
                    r.region_id
                )));
            }
            clusters
                .get_mut(r.cluster_id)
                .ok_or_else(|| Error::input(format!("overlap cluster id {} ≥ N = {n}", r.cluster_id)))?
                .push((r.region_id, r.percent));
        }
        Self::new(clusters)
    }

    pub fn load(path: &Path, n_clusters: Option<usize>) -> Result<Self> {
        Self::parse_csv(&io::read_text(path)?, n_clusters, path)
    }
}

/// The `m` most intersected regions of one cluster, highest percent first,
/// ties by lower region id.
pub fn top_m_regions(entries: &[(RegionId, f64)], m: usize) -> Vec<RegionId> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(m).map(|(r, _)| r).collect()
}

/// The two most intersected regions of one cluster.
pub fn top_regions(entries: &[(RegionId, f64)]) -> Result<[RegionId; 2]> {
    if entries.len() < 2 {
        return Err(Error::input("top_regions needs at least 2 entries"));
    }
    let t = top_m_regions(entries, 2);
    Ok([t[0], t[1]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Wmg,
    Gmg,
    Cmg,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::Wmg => "wmg",
            GraphKind::Gmg => "gmg",
            GraphKind::Cmg => "cmg",
        })
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wmg" => Ok(GraphKind::Wmg),
            "gmg" => Ok(GraphKind::Gmg),
            "cmg" => Ok(GraphKind::Cmg),
            other => Err(Error::config(format!("unknown graph kind `{other}` (wmg|gmg|cmg)"))),
        }
    }
}

/// Per-node neighbor lists over N fiber clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGraph {
    pub kind: GraphKind,
    pub n_nodes: usize,
    /// Neighbor budget (WMG and CMG only).
    pub k: Option<usize>,
    /// Fiber metric behind the geometry (WMG and CMG only).
    pub metric_tag: Option<String>,
    pub neighbors: Vec<Vec<usize>>,
}

impl ClusterGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_lists(&self) -> NeighborLists {
        NeighborLists::new(self.neighbors.clone())
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn isolated_nodes(&self) -> usize {
        self.neighbors.iter().filter(|l| l.is_empty()).count()
    }

    /// Check the structural invariants of this graph's kind.
    pub fn validate(&self) -> Result<()> {
        if self.neighbors.len() != self.n_nodes {
            return Err(Error::input(format!(
                "graph has {} neighbor lists for {} nodes",
                self.neighbors.len(),
                self.n_nodes
            )));
        }
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for &j in list {
                if j >= self.n_nodes {
                    return Err(Error::input(format!("node {i}: neighbor {j} out of range")));
                }
                if j == i {
                    return Err(Error::input(format!("node {i}: self-loop")));
                }
                if !seen.insert(j) {
                    return Err(Error::input(format!("node {i}: neighbor {j} repeated")));
                }
            }
        }
        match self.kind {
            GraphKind::Wmg => {
                let k = self.k.ok_or_else(|| Error::input("WMG without k"))?;
                let want = k.min(self.n_nodes - 1);
                if let Some(i) = self.neighbors.iter().position(|l| l.len() != want) {
                    return Err(Error::input(format!(
                        "WMG node {i} has degree {}, expected {want}",
                        self.neighbors[i].len()
                    )));
                }
            }
            GraphKind::Gmg => {
                for (i, list) in self.neighbors.iter().enumerate() {
                    if let Some(&j) = list.iter().find(|&&j| !self.neighbors[j].contains(&i)) {
                        return Err(Error::input(format!("GMG edge {i}→{j} is not symmetric")));
                    }
                }
            }
            GraphKind::Cmg => {
                let k = self.k.ok_or_else(|| Error::input("CMG without k"))?;
                if let Some(i) = self.neighbors.iter().position(|l| l.len() > k) {
                    return Err(Error::input(format!("CMG node {i} exceeds degree {k}")));
                }
            }
        }
        Ok(())
    }
}

/// k nearest clusters per node, ascending by distance, ties by lower index.
pub fn build_wmg(d: &DistanceMatrix, k: usize) -> Result<ClusterGraph> {
    build_wmg_tagged(d, k, "mdf")
}

pub fn build_wmg_tagged(d: &DistanceMatrix, k: usize, metric_tag: &str) -> Result<ClusterGraph> {
    let n = d.n();
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "neighbor budget k = {k} must satisfy 1 ≤ k ≤ N − 1 = {}",
            n - 1
        )));
    }
    let neighbors = (0..n)
        .map(|i| {
            let row = d.row(i);
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect();
    Ok(ClusterGraph {
        kind: GraphKind::Wmg,
        n_nodes: n,
        k: Some(k),
        metric_tag: Some(metric_tag.to_string()),
        neighbors,
    })
}

/// Clusters are neighbors iff their top-two region sets are shared.
pub fn build_gmg(table: &RegionOverlapTable) -> Result<ClusterGraph> {
    build_gmg_with(table, 2, 2)
}

/// Generalized GMG: neighbors iff the top-`top_m` region sets share at
/// least `min_shared` regions.
pub fn build_gmg_with(table: &RegionOverlapTable, top_m: usize, min_shared: usize) -> Result<ClusterGraph> {
    let n = table.n_clusters();
    if n < 2 {
        return Err(Error::input(format!("GMG needs N ≥ 2 clusters, got {n}")));
    }
    if top_m < 2 || min_shared == 0 || min_shared > top_m {
        return Err(Error::config(format!(
            "GMG needs 2 ≤ top_m and 1 ≤ min_shared ≤ top_m (got {top_m}, {min_shared})"
        )));
    }
    let tops: Vec<BTreeSet<RegionId>> = (0..n)
        .map(|c| top_m_regions(table.entries(c), top_m).into_iter().collect())
        .collect();
    let neighbors = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && tops[i].intersection(&tops[j]).count() >= min_shared)
                .collect()
        })
        .collect();
    Ok(ClusterGraph {
        kind: GraphKind::Gmg,
        n_nodes: n,
        k: None,
        metric_tag: None,
        neighbors,
    })
}

/// Per-node intersection of WMG and GMG neighborhoods in WMG order.
pub fn build_cmg(wmg: &ClusterGraph, gmg: &ClusterGraph) -> Result<ClusterGraph> {
    if wmg.kind != GraphKind::Wmg || gmg.kind != GraphKind::Gmg {
        return Err(Error::config(format!(
            "build_cmg expects (wmg, gmg), got ({}, {})",
            wmg.kind, gmg.kind
        )));
    }
    if wmg.n_nodes != gmg.n_nodes {
        return Err(Error::config(format!(
            "build_cmg: WMG has {} nodes but GMG has {}",
            wmg.n_nodes, gmg.n_nodes
        )));
    }
    let neighbors = wmg
        .neighbors
        .iter()
        .zip(&gmg.neighbors)
        .map(|(w, g)| {
            let gs: BTreeSet<usize> = g.iter().copied().collect();
            w.iter().copied().filter(|j| gs.contains(j)).collect()
        })
        .collect();
    Ok(ClusterGraph {
        kind: GraphKind::Cmg,
        n_nodes: wmg.n_nodes,
        k: wmg.k,
        metric_tag: wmg.metric_tag.clone(),
        neighbors,
    })
}

/// Check `neighbors(cmg, i) ⊆ neighbors(wmg, i) ∩ neighbors(gmg, i)`.
pub fn validate_cmg_subset(cmg: &ClusterGraph, wmg: &ClusterGraph, gmg: &ClusterGraph) -> Result<()> {
    if cmg.n_nodes != wmg.n_nodes || cmg.n_nodes != gmg.n_nodes {
        return Err(Error::input("CMG/WMG/GMG node counts differ"));
    }
    for i in 0..cmg.n_nodes {
        for &j in cmg.neighbors(i) {
            if !wmg.neighbors(i).contains(&j) || !gmg.neighbors(i).contains(&j) {
                return Err(Error::input(format!(
                    "CMG edge {i}→{j} is not in both WMG and GMG"
                )));
            }
        }
    }
    Ok(())
}

/// Graph JSON on disk: the graph plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    #[serde(flatten)]
    pub graph: ClusterGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GraphFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: GraphFile = io::read_json(path)?;
        f.graph.validate()?;
        Ok(f)
    }
}
