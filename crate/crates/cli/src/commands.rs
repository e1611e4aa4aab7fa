//! One function per subcommand. Each returns the paths it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use tractgraph::features::{cohort_csv, Cohort};
use tractgraph::geometry::{distance_matrix, AtlasFile, DistanceMatrix};
use tractgraph::graph::{
    build_cmg, build_gmg, build_wmg_tagged, validate_cmg_subset, ClusterGraph, GraphFile, GraphKind, RegionOverlapTable,
};
use tractgraph::interpret::{build_report, emit_report, TractMap};
use tractgraph::io;
use tractgraph::model::ModelSnapshot;
use tractgraph::synth::{gen_atlas, gen_cohort};
use tractgraph::train::{compare_runs, cross_validate, Comparison, GraphInfo, Metrics, RunResults};
use tractgraph::{Error, Result};

use crate::config::{self, graph_file_name, Loaded};

/// Create `dir`, reporting an unwritable location as a configuration error.
fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config(format!("output directory {} is not writable: {e}", dir.display())))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::input(format!("{what} not found at {}", path.display())))
    }
}

fn provenance(l: &Loaded) -> String {
    format!("config_digest={} seed={}", l.digest, l.seed())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub seed: u64,
    pub atlas_seed: u64,
    pub cohort_seed: u64,
    pub files: Vec<String>,
}

/// Generate a synthetic atlas, cohort and ground truth.
pub fn cmd_gen(l: &Loaded) -> Result<Vec<PathBuf>> {
    let out = l.out_dir();
    ensure_dir(&out)?;
    let gen = &l.config.gen;
    let mut atlas = gen_atlas(&gen.atlas)?;
    let mut synthetic = gen_cohort(&atlas, &gen.cohort)?;
    atlas.atlas.config_digest = Some(l.digest.clone());
    atlas.atlas.seed = Some(l.seed());
    synthetic.truth.config_digest = Some(l.digest.clone());
    info!(
        "generated {} clusters and {} subjects; planted clusters {:?}",
        atlas.atlas.clusters.len(),
        synthetic.cohort.len(),
        synthetic.truth.planted_clusters
    );

    let tag = provenance(l);
    let files = [
        (config::ATLAS_FILE, io::to_json_pretty(&atlas.atlas)?),
        (config::OVERLAPS_FILE, atlas.overlaps.to_csv(Some(&tag))?),
        (config::TRACTS_FILE, atlas.tracts.to_csv(Some(&tag))?),
        (config::COHORT_FILE, cohort_csv(&synthetic.records, Some(&tag))?),
        (config::TRUTH_FILE, io::to_json_pretty(&synthetic.truth)?),
    ];
    let mut written = Vec::new();
    for (name, text) in &files {
        let path = out.join(name);
        io::write_text(&path, text)?;
        written.push(path);
    }
    let manifest = Manifest {
        config_digest: l.digest.clone(),
        seed: l.seed(),
        atlas_seed: gen.atlas.seed,
        cohort_seed: gen.cohort.seed,
        files: files.iter().map(|f| f.0.to_string()).collect(),
    };
    let path = out.join(config::MANIFEST_FILE);
    io::write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

/// Lazily loaded graph inputs shared by `graph`, `train` and `sweep`.
struct GraphInputs<'a> {
    l: &'a Loaded,
    atlas_digest: Option<String>,
    distances: Option<DistanceMatrix>,
    overlaps: Option<RegionOverlapTable>,
}

impl<'a> GraphInputs<'a> {
    fn new(l: &'a Loaded) -> Self {
        Self {
            l,
            atlas_digest: None,
            distances: None,
            overlaps: None,
        }
    }

    fn distances(&mut self) -> Result<&DistanceMatrix> {
        if self.distances.is_none() {
            let d = match self.l.distances_path() {
                Some(p) => {
                    info!("loading distances from {}", p.display());
                    self.atlas_digest = Some(io::short_digest(&fs::read(&p).map_err(|e| Error::io(&p, e))?));
                    DistanceMatrix::load(&p)?
                }
                None => {
                    let p = self.l.atlas_path();
                    require(&p, "atlas")?;
                    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    self.atlas_digest = Some(io::short_digest(&bytes));
                    let clusters = AtlasFile::load(&p)?.into_ordered_clusters()?;
                    let g = &self.l.config.graph;
                    info!("computing {} distances over {} clusters", g.metric.tag(), clusters.len());
                    distance_matrix(&clusters, g.points, g.metric)?
                }
            };
            self.distances = Some(d);
        }
        Ok(self.distances.as_ref().expect("just set"))
    }

    fn overlaps(&mut self, kind: GraphKind) -> Result<&RegionOverlapTable> {
        if self.overlaps.is_none() {
            let p = self.l.overlaps_path();
            if !p.is_file() {
                return Err(Error::input(format!(
                    "{kind} needs the region overlap table, which was not found at {}",
                    p.display()
                )));
            }
            self.overlaps = Some(RegionOverlapTable::load(&p, None)?);
        }
        Ok(self.overlaps.as_ref().expect("just set"))
    }

    fn build(&mut self, kind: GraphKind, k: usize) -> Result<ClusterGraph> {
        let tag = self.l.config.graph.metric.tag();
        match kind {
            GraphKind::Wmg => build_wmg_tagged(self.distances()?, k, tag),
            GraphKind::Gmg => build_gmg(self.overlaps(kind)?),
            GraphKind::Cmg => {
                let gmg = build_gmg(self.overlaps(kind)?)?;
                let wmg = build_wmg_tagged(self.distances()?, k, tag)?;
                if wmg.n_nodes != gmg.n_nodes {
                    return Err(Error::input(format!(
                        "atlas has N = {} clusters but the overlap table has N = {}",
                        wmg.n_nodes, gmg.n_nodes
                    )));
                }
                let cmg = build_cmg(&wmg, &gmg)?;
                validate_cmg_subset(&cmg, &wmg, &gmg)?;
                Ok(cmg)
            }
        }
    }

    fn file(&mut self, kind: GraphKind, k: usize) -> Result<GraphFile> {
        let graph = self.build(kind, k)?;
        // GMG does not read the geometry
        let atlas_digest = if kind == GraphKind::Gmg { None } else { self.atlas_digest.clone() };
        Ok(GraphFile {
            graph,
            atlas_digest,
            config_digest: Some(self.l.digest.clone()),
            seed: Some(self.l.seed()),
        })
    }
}

/// Build every requested graph kind.
pub fn cmd_graph(l: &Loaded) -> Result<Vec<PathBuf>> {
    let out = l.out_dir();
    ensure_dir(&out)?;
    let mut inputs = GraphInputs::new(l);
    let k = l.config.graph.k;
    let mut written = Vec::new();
    for &kind in &l.config.graph.kinds {
        let file = inputs.file(kind, k)?;
        info!(
            "{kind}: {} nodes, {} isolated",
            file.graph.n_nodes,
            file.graph.isolated_nodes()
        );
        let path = out.join(graph_file_name(kind, k));
        io::write_json(&path, &file)?;
        written.push(path);
    }
    Ok(written)
}

/// Per-fold model snapshot on disk.
#[derive(Debug, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub config_digest: String,
    pub master_seed: u64,
    pub fold: usize,
    pub model: ModelSnapshot,
}

/// Cross-validate with an in-memory graph (`None` when the model has no
/// graph stream) and write results plus snapshots under `dir`.
fn train_into(l: &Loaded, cohort: &Cohort, graph: Option<(&ClusterGraph, String)>, dir: &Path) -> Result<RunResults> {
    let t = &l.config.train;
    let model = t.model(cohort.n_clusters, l.seed()).validated()?;
    let graph = if model.needs_graph() { graph } else { None };
    if let Some((g, _)) = &graph {
        if g.n_nodes != cohort.n_clusters {
            return Err(Error::input(format!(
                "graph has N = {} nodes but the cohort has N = {} clusters",
                g.n_nodes, cohort.n_clusters
            )));
        }
    }
    let training = t.training();
    let run = cross_validate(cohort, graph.as_ref().map(|g| g.0), &model, &training, l.seed(), t.workers)?;
    let results = run.to_results(
        &l.digest,
        l.seed(),
        t.name.clone(),
        &training,
        graph.as_ref().map(|g| GraphInfo::of(g.0)),
    );
    ensure_dir(dir)?;
    io::write_json(&dir.join(config::RESULTS_FILE), &results)?;
    for fold in &run.folds {
        let mut snapshot = fold.snapshot.clone();
        snapshot.graph_ref = graph.as_ref().map(|g| g.1.clone());
        let file = SnapshotFile {
            config_digest: l.digest.clone(),
            master_seed: l.seed(),
            fold: fold.fold,
            model: snapshot,
        };
        io::write_json(&dir.join("snapshots").join(format!("fold_{}.json", fold.fold)), &file)?;
    }
    info!(
        "accuracy {:.4} ± {:.4}, f1 {:.4} ± {:.4}",
        results.mean.accuracy, results.sd.accuracy, results.mean.f1, results.sd.f1
    );
    Ok(results)
}

fn load_cohort(l: &Loaded) -> Result<Cohort> {
    let p = l.cohort_path();
    require(&p, "cohort")?;
    Cohort::load(&p, None)
}

/// Run k-fold cross-validation on the configured cohort and graph file.
pub fn cmd_train(l: &Loaded) -> Result<Vec<PathBuf>> {
    let out = l.out_dir();
    ensure_dir(&out)?;
    let cohort = load_cohort(l)?;
    let needs_graph = l.config.train.model(cohort.n_clusters, l.seed()).validated()?.needs_graph();
    let graph = if needs_graph {
        let p = l.graph_path();
        require(&p, "graph file (run `graph` first or set paths.graph)")?;
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let file = GraphFile::load(&p)?;
        if file.graph.kind != l.config.train.graph_kind {
            warn!(
                "graph file {} holds a {} graph; train.graph_kind is {}",
                p.display(),
                file.graph.kind,
                l.config.train.graph_kind
            );
        }
        Some((file.graph, io::short_digest(&bytes)))
    } else {
        None
    };
    train_into(l, &cohort, graph.as_ref().map(|(g, d)| (g, d.clone())), &out)?;
    let mut written = vec![out.join(config::RESULTS_FILE)];
    written.extend((0..l.config.train.n_folds).map(|f| out.join("snapshots").join(format!("fold_{f}.json"))));
    Ok(written)
}

/// Aggregate attention from a results file into a report.
pub fn cmd_interpret(l: &Loaded, results: Option<&Path>, tracts: Option<&Path>) -> Result<Vec<PathBuf>> {
    let out = l.out_dir();
    ensure_dir(&out)?;
    let results_path = results.map(Path::to_path_buf).unwrap_or_else(|| l.results_path());
    let tracts_path = tracts.map(Path::to_path_buf).unwrap_or_else(|| l.tracts_path());
    require(&results_path, "results file")?;
    require(&tracts_path, "tract map")?;
    let run: RunResults = io::read_json(&results_path)?;
    let map = TractMap::load(&tracts_path)?;
    let report = build_report(&run, &map, l.config.interpret.rule)?;
    info!(
        "rule {}: {} predictive clusters, tracts {:?}",
        report.rule,
        report.predictive_clusters.len(),
        report.predictive_tracts
    );
    Ok(emit_report(&report, Some(&map), &out)?.to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparisonFile {
    pub config_digest: String,
    pub seed: u64,
    pub inputs: [String; 2],
    pub comparisons: Vec<Comparison>,
}

fn run_name(run: &RunResults, path: &Path) -> String {
    run.name.clone().unwrap_or_else(|| path.display().to_string())
}

/// Paired t-tests between two results files.
pub fn cmd_compare(l: &Loaded, a: &Path, b: &Path) -> Result<Vec<PathBuf>> {
    let out = l.out_dir();
    ensure_dir(&out)?;
    require(a, "results file")?;
    require(b, "results file")?;
    let ra: RunResults = io::read_json(a)?;
    let rb: RunResults = io::read_json(b)?;
    let cmp = compare_runs(&ra, &rb, &run_name(&ra, a), &run_name(&rb, b))?;
    for (metric, t) in &cmp.tests {
        info!(
            "{metric}: mean diff {:+.4}, t = {}, significant: {}",
            t.mean_difference,
            t.t.map_or("±inf".to_string(), |v| format!("{v:.4}")),
            t.significant
        );
    }
    let file = ComparisonFile {
        config_digest: l.digest.clone(),
        seed: l.seed(),
        inputs: [a.display().to_string(), b.display().to_string()],
        comparisons: vec![cmp],
    };
    let path = out.join("comparison.json");
    io::write_json(&path, &file)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub isolated_nodes: usize,
    pub mean: Metrics,
    pub sd: Metrics,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepFile {
    pub config_digest: String,
    pub seed: u64,
    pub graph_kind: GraphKind,
    pub rows: Vec<SweepRow>,
}

/// Train once per neighbor budget and tabulate accuracy against k.
pub fn cmd_sweep(l: &Loaded) -> Result<Vec<PathBuf>> {
    let kind = l.config.train.graph_kind;
    if kind == GraphKind::Gmg {
        return Err(Error::config("sweep varies k, which GMG does not use; choose wmg or cmg"));
    }
    let out = l.out_dir();
    ensure_dir(&out)?;
    let cohort = load_cohort(l)?;
    let mut inputs = GraphInputs::new(l);
    let mut rows = Vec::new();
    for &k in &l.config.sweep.ks {
        info!("sweep: {kind} with k = {k}");
        let file = inputs.file(kind, k)?;
        let dir = out.join(format!("k{k}"));
        ensure_dir(&dir)?;
        let graph_path = dir.join(graph_file_name(kind, k));
        io::write_json(&graph_path, &file)?;
        let digest = io::short_digest(io::to_json_pretty(&file)?.as_bytes());
        let results = train_into(l, &cohort, Some((&file.graph, digest)), &dir)?;
        rows.push(SweepRow {
            k,
            isolated_nodes: file.graph.isolated_nodes(),
            mean: results.mean,
            sd: results.sd,
        });
    }
    let mut csv = format!("# {}\nk,isolated_nodes,accuracy_mean,accuracy_sd,f1_mean,f1_sd\n", provenance(l));
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.k, r.isolated_nodes, r.mean.accuracy, r.sd.accuracy, r.mean.f1, r.sd.f1
        );
    }
    let csv_path = out.join("sweep.csv");
    io::write_text(&csv_path, &csv)?;
    let json_path = out.join("sweep.json");
    io::write_json(
        &json_path,
        &SweepFile {
            config_digest: l.digest.clone(),
            seed: l.seed(),
            graph_kind: kind,
            rows,
        },
    )?;
    Ok(vec![csv_path, json_path])
}
