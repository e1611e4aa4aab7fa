//! The experiment config file: one JSON document with a section per
//! subcommand. Command-line flags override individual fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tractgraph::geometry::FiberMetric;
use tractgraph::graph::GraphKind;
use tractgraph::interpret::SelectionRule;
use tractgraph::io;
use tractgraph::model::{Baseline, ModelConfig, Streams};
use tractgraph::synth::{SyntheticAtlasConfig, SyntheticCohortConfig};
use tractgraph::train::{FrozenParam, TrainConfig};
use tractgraph::{Error, Result};

/// Input and output locations. Relative paths resolve against the config
/// file's directory; unset inputs default to files inside `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub overlaps: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    /// Precomputed cluster distance matrix (CSV); computed from the atlas
    /// when absent.
    pub distances: Option<PathBuf>,
    /// Graph used by `train`; defaults to the file `graph` would write.
    pub graph: Option<PathBuf>,
    /// Results file read by `interpret`.
    pub results: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub atlas: SyntheticAtlasConfig,
    pub cohort: SyntheticCohortConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub kinds: Vec<GraphKind>,
    pub k: usize,
    pub metric: FiberMetric,
    /// Resampling count for streamline distances.
    pub points: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            kinds: vec![GraphKind::Wmg, GraphKind::Gmg, GraphKind::Cmg],
            k: 30,
            metric: FiberMetric::MinimumDirectFlip,
            points: 20,
        }
    }
}

/// Layer widths; the remaining model settings come from the train section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub edgeconv_dims: [usize; 2],
    pub stream_dim: usize,
    pub attention_hidden: usize,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            edgeconv_dims: m.edgeconv_dims,
            stream_dim: m.stream_dim,
            attention_hidden: m.attention_hidden,
            head_hidden: m.head_hidden,
            ffn_hidden: m.ffn_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub name: Option<String>,
    pub graph_kind: GraphKind,
    pub streams: Streams,
    pub attention: bool,
    pub baseline: Baseline,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_folds: usize,
    pub frozen: Vec<FrozenParam>,
    /// Folds trained concurrently. Results do not depend on it.
    pub workers: usize,
    pub widths: Widths,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            name: None,
            graph_kind: GraphKind::Cmg,
            streams: Streams::Both,
            attention: true,
            baseline: Baseline::None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            n_folds: t.n_folds,
            frozen: Vec::new(),
            workers: 1,
            widths: Widths::default(),
        }
    }
}

impl TrainSection {
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            n_folds: self.n_folds,
            frozen: self.frozen.clone(),
        }
    }

    pub fn model(&self, n_clusters: usize, seed: u64) -> ModelConfig {
        let w = &self.widths;
        ModelConfig {
            n_clusters,
            edgeconv_dims: w.edgeconv_dims,
            stream_dim: w.stream_dim,
            attention_hidden: w.attention_hidden,
            head_hidden: w.head_hidden,
            ffn_hidden: w.ffn_hidden,
            streams: self.streams,
            use_attention: self.attention,
            baseline: self.baseline,
            seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub rule: SelectionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ks: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ks: vec![10, 20, 30, 40, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed derives from it unless set explicitly.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub gen: GenSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub interpret: InterpretSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// Flag overrides shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub graph_kind: Option<GraphKind>,
    pub k: Option<usize>,
    pub streams: Option<Streams>,
    pub attention: Option<bool>,
    pub baseline: Option<Baseline>,
    pub top_q: Option<f64>,
    pub workers: Option<usize>,
}

/// A loaded config with overrides applied and seeds resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Directory that relative paths resolve against.
    pub base: PathBuf,
    /// Output directory named by the config file itself; unset inputs are
    /// looked up here even when `--out` redirects outputs.
    input_dir: Option<PathBuf>,
    /// Digest of everything except `paths` and the worker count, neither of
    /// which can change an experiment's results.
    pub digest: String,
}

fn has_key(v: &Value, path: &[&str]) -> bool {
    let mut cur = v;
    for key in path {
        match cur.get(key) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    true
}

impl RunConfig {
    /// Parse config text; errors carry line and column.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let located = |e: serde_json::Error| {
            Error::config(format!("{}: {e}", path.display()))
        };
        let raw: Value = serde_json::from_str(text).map_err(located)?;
        let mut config: RunConfig = serde_json::from_str(text).map_err(located)?;
        // generator seeds not given explicitly follow the master seed
        if !has_key(&raw, &["gen", "atlas", "seed"]) {
            config.gen.atlas.seed = config.seed;
        }
        if !has_key(&raw, &["gen", "cohort", "seed"]) {
            config.gen.cohort.seed = config.seed.wrapping_add(1);
        }
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            let shift = seed.wrapping_sub(self.seed);
            self.seed = seed;
            self.gen.atlas.seed = self.gen.atlas.seed.wrapping_add(shift);
            self.gen.cohort.seed = self.gen.cohort.seed.wrapping_add(shift);
        }
        if let Some(out) = &o.out {
            self.paths.out_dir = Some(out.clone());
        }
        if let Some(kind) = o.graph_kind {
            self.train.graph_kind = kind;
            self.graph.kinds = vec![kind];
        }
        if let Some(k) = o.k {
            self.graph.k = k;
        }
        if let Some(s) = o.streams {
            self.train.streams = s;
        }
        if let Some(a) = o.attention {
            self.train.attention = a;
        }
        if let Some(b) = o.baseline {
            self.train.baseline = b;
        }
        if let Some(q) = o.top_q {
            self.interpret.rule = SelectionRule::TopPercent { q };
        }
        if let Some(w) = o.workers {
            self.train.workers = w;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.k == 0 {
            return Err(Error::config("graph.k must be ≥ 1"));
        }
        if self.graph.points < 2 {
            return Err(Error::config("graph.points must be ≥ 2"));
        }
        if self.sweep.ks.contains(&0) {
            return Err(Error::config("sweep.ks entries must be ≥ 1"));
        }
        if self.train.workers == 0 {
            return Err(Error::config("train.workers must be ≥ 1"));
        }
        self.train.training().validate()?;
        self.interpret.rule.validate()
    }
}

/// Load `path` (or start from defaults with the seed taken from the flags
/// when no config is given) and apply overrides.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Loaded> {
    let (mut config, base) = match path {
        Some(p) => {
            let text = io::read_text(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (RunConfig::parse(&text, p)?, base)
        }
        None => {
            let seed = overrides
                .seed
                .ok_or_else(|| Error::config("missing field `seed`: pass --config or --seed"))?;
            let text = format!("{{\"seed\": {seed}}}");
            (RunConfig::parse(&text, Path::new("<flags>"))?, PathBuf::new())
        }
    };
    let input_dir = config.paths.out_dir.clone();
    config.apply(overrides)?;
    let digest = digest_of(&config)?;
    let mut loaded = Loaded {
        config,
        base,
        digest,
        input_dir: None,
    };
    loaded.input_dir = input_dir.map(|p| loaded.resolve(&p));
    Ok(loaded)
}

fn digest_of(config: &RunConfig) -> Result<String> {
    let mut v = serde_json::to_value(config).map_err(|e| Error::input(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("paths");
        if let Some(train) = obj.get_mut("train").and_then(Value::as_object_mut) {
            train.remove("workers");
        }
    }
    Ok(io::short_digest(v.to_string().as_bytes()))
}

impl Loaded {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        match &self.config.paths.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.resolve(p),
            None => self.resolve(Path::new("out")),
        }
    }

    fn input(&self, given: &Option<PathBuf>, default_name: &str) -> PathBuf {
        match given {
            Some(p) => self.resolve(p),
            None => self.input_dir().join(default_name),
        }
    }

    fn input_dir(&self) -> PathBuf {
        self.input_dir.clone().unwrap_or_else(|| self.out_dir())
    }

    pub fn atlas_path(&self) -> PathBuf {
        self.input(&self.config.paths.atlas, ATLAS_FILE)
    }

    pub fn overlaps_path(&self) -> PathBuf {
        self.input(&self.config.paths.overlaps, OVERLAPS_FILE)
    }

    pub fn tracts_path(&self) -> PathBuf {
        self.input(&self.config.paths.tracts, TRACTS_FILE)
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.input(&self.config.paths.cohort, COHORT_FILE)
    }

    pub fn results_path(&self) -> PathBuf {
        self.input(&self.config.paths.results, RESULTS_FILE)
    }

    pub fn distances_path(&self) -> Option<PathBuf> {
        self.config.paths.distances.as_ref().map(|p| self.resolve(p))
    }

    pub fn graph_path(&self) -> PathBuf {
        match &self.config.paths.graph {
            Some(p) => self.resolve(p),
            None => self.input_dir().join(graph_file_name(self.config.train.graph_kind, self.config.graph.k)),
        }
    }
}

pub const ATLAS_FILE: &str = "atlas.json";
pub const OVERLAPS_FILE: &str = "overlaps.csv";
pub const TRACTS_FILE: &str = "tracts.csv";
pub const COHORT_FILE: &str = "cohort.csv";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.json";

/// `wmg_k30.json`, `gmg.json`, `cmg_k30.json`.
pub fn graph_file_name(kind: GraphKind, k: usize) -> String {
    match kind {
        GraphKind::Gmg => "gmg.json".to_string(),
        _ => format!("{kind}_k{k}.json"),
    }
}
