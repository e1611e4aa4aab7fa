//! Two-stream classifier: an EdgeConv graph stream and a tokenized
//! single-layer Transformer stream, fused by learnable weights, gated by a
//! per-cluster attention score and classified from the flattened map.
//!
//! Every forward pass works on a mini-batch of B subjects stacked into
//! (B·N)-row matrices; graph and attention operators act block-wise, so the
//! result for one subject never depends on the rest of the batch.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{glorot_bound, BoundParams, DifferentiableArray, NeighborLists, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::features::{NormalizationParams, SubjectFeatures, N_CHANNELS};
use crate::graph::ClusterGraph;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Which feature streams feed the fusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Streams {
    Graph,
    Transformer,
    #[default]
    Both,
}

impl Streams {
    pub fn graph(self) -> bool {
        matches!(self, Streams::Graph | Streams::Both)
    }

    pub fn transformer(self) -> bool {
        matches!(self, Streams::Transformer | Streams::Both)
    }
}

impl fmt::Display for Streams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Streams::Graph => "graph",
            Streams::Transformer => "transformer",
            Streams::Both => "both",
        })
    }
}

impl FromStr for Streams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Streams::Graph),
            "transformer" => Ok(Streams::Transformer),
            "both" => Ok(Streams::Both),
            other => Err(Error::config(format!("unknown streams `{other}` (graph|transformer|both)"))),
        }
    }
}

/// Replacement architectures used as comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Baseline {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Graph stream with both EdgeConv layers replaced by kernel-size-1
    /// convolutions; no transformer, no attention.
    #[serde(rename = "1dcnn-pointwise")]
    PointwiseCnn,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::None => "none",
            Baseline::PointwiseCnn => "1dcnn-pointwise",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "1dcnn-pointwise" => Ok(Baseline::PointwiseCnn),
            other => Err(Error::config(format!("unknown baseline `{other}` (none|1dcnn-pointwise)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_clusters: usize,
    pub in_features: usize,
    pub edgeconv_dims: [usize; 2],
    pub stream_dim: usize,
    pub attention_hidden: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub streams: Streams,
    pub use_attention: bool,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_clusters: 0,
            in_features: N_CHANNELS,
            edgeconv_dims: [64, 64],
            stream_dim: 96,
            attention_hidden: 64,
            head_hidden: 128,
            n_classes: 2,
            transformer_layers: 1,
            heads: 1,
            ffn_hidden: 192,
            streams: Streams::Both,
            use_attention: true,
            baseline: Baseline::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(n_clusters: usize) -> Self {
        Self {
            n_clusters,
            ..Self::default()
        }
    }

    /// Reject unsupported settings; the pointwise baseline forces the graph
    /// stream alone without attention.
    pub fn validated(mut self) -> Result<Self> {
        if self.baseline == Baseline::PointwiseCnn {
            self.streams = Streams::Graph;
            self.use_attention = false;
        }
        if self.n_clusters == 0 {
            return Err(Error::config("model needs n_clusters ≥ 1"));
        }
        if self.in_features != N_CHANNELS {
            return Err(Error::config(format!(
                "in_features must be {N_CHANNELS} (fa, md, pos), got {}",
                self.in_features
            )));
        }
        if self.n_classes != 2 {
            return Err(Error::config("only binary classification (n_classes = 2) is supported"));
        }
        if self.transformer_layers != 1 || self.heads != 1 {
            return Err(Error::config("only one transformer layer with one head is supported"));
        }
        let dims = [
            self.edgeconv_dims[0],
            self.edgeconv_dims[1],
            self.stream_dim,
            self.attention_hidden,
            self.head_hidden,
            self.ffn_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(self)
    }

    /// Whether the graph stream needs a cluster graph.
    pub fn needs_graph(&self) -> bool {
        self.streams.graph() && self.baseline == Baseline::None
    }

    pub fn fused(&self) -> bool {
        self.streams == Streams::Both
    }

    /// `(name, rows, cols, init)` for every learnable array.
    fn layout(&self) -> Vec<(String, usize, usize, Init)> {
        let mut out = Vec::new();
        let mut dense = |name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            out.push((format!("{name}.w"), fan_in, fan_out, Init::Glorot));
            if bias {
                out.push((format!("{name}.b"), 1, fan_out, Init::Zeros));
            }
        };
        let [e1, e2] = self.edgeconv_dims;
        let d = self.stream_dim;
        if self.streams.graph() {
            match self.baseline {
                Baseline::None => {
                    dense("graph.edge1", 2 * self.in_features, e1, true);
                    dense("graph.edge2", 2 * e1, e2, true);
                }
                Baseline::PointwiseCnn => {
                    dense("cnn.conv1", self.in_features, e1, true);
                    dense("cnn.conv2", e1, e2, true);
                }
            }
            dense("graph.agg", e1 + e2, d, true);
        }
        if self.streams.transformer() {
            dense("tf.tok", self.in_features, d, true);
            for name in ["tf.q", "tf.k", "tf.v", "tf.o"] {
                dense(name, d, d, true);
            }
            dense("tf.ffn1", d, self.ffn_hidden, true);
            dense("tf.ffn2", self.ffn_hidden, d, true);
        }
        if self.use_attention {
            dense("attn.v", d, self.attention_hidden, false);
            dense("attn.u", d, self.attention_hidden, false);
            dense("attn.out", 2 * self.attention_hidden, 1, true);
        }
        dense("head.fc1", d * self.n_clusters, self.head_hidden, true);
        dense("head.fc2", self.head_hidden, self.n_classes, true);
        if self.streams.transformer() {
            out.push(("tf.pos".into(), self.n_clusters, d, Init::Glorot));
            for ln in ["tf.ln1", "tf.ln2"] {
                out.push((format!("{ln}.g"), 1, d, Init::Ones));
                out.push((format!("{ln}.b"), 1, d, Init::Zeros));
            }
        }
        if self.fused() {
            out.push(("fusion.w1".into(), 1, 1, Init::Half));
            out.push(("fusion.w2".into(), 1, 1, Init::Half));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Ones,
    Half,
}

/// Seed for one parameter: the master seed mixed with the parameter name,
/// so ablation arms that share a parameter also share its initial values.
fn param_seed(master: u64, name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    master ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Fresh parameters: Glorot-uniform weights, zero biases, unit layer-norm
/// gains and fusion weights of 0.5.
pub fn init_params(config: &ModelConfig) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, rows, cols, init) in config.layout() {
        let values = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            Init::Half => vec![0.5; rows * cols],
            Init::Glorot => {
                let bound = glorot_bound(rows, cols);
                let mut rng = ChaCha8Rng::seed_from_u64(param_seed(config.seed, &name));
                (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let array = DifferentiableArray::new(vec![rows, cols], values).expect("layout shape");
        ps.insert(name, array);
    }
    ps
}

/// Tape handles produced by one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// B×2 logits.
    pub logits: Var,
    /// (B·N)×1 attention scores, when attention is enabled.
    pub scores: Option<Var>,
    pub graph_out: Option<Var>,
    pub transformer_out: Option<Var>,
    /// (B·N)×d fused features before gating.
    pub fused: Var,
}

/// EdgeConv graph stream with its multi-scale shortcut.
pub fn graph_stream(
    tape: &mut Tape,
    p: &BoundParams,
    config: &ModelConfig,
    x: Var,
    neighbors: Option<&NeighborLists>,
) -> Result<Var> {
    let (e1, e2) = match config.baseline {
        Baseline::None => {
            let nb = neighbors.ok_or_else(|| Error::config("graph stream needs a cluster graph"))?;
            if nb.len() != config.n_clusters {
                return Err(Error::config(format!(
                    "graph has {} nodes but the model expects N = {}",
                    nb.len(),
                    config.n_clusters
                )));
            }
            let e1 = tape.edge_conv(x, p.get("graph.edge1.w")?, p.get("graph.edge1.b")?, nb, LEAKY_SLOPE)?;
            let e2 = tape.edge_conv(e1, p.get("graph.edge2.w")?, p.get("graph.edge2.b")?, nb, LEAKY_SLOPE)?;
            (e1, e2)
        }
        Baseline::PointwiseCnn => {
            let z1 = tape.linear(x, p.get("cnn.conv1.w")?, p.get("cnn.conv1.b")?)?;
            let e1 = tape.leaky_relu(z1, LEAKY_SLOPE)?;
            let z2 = tape.linear(e1, p.get("cnn.conv2.w")?, p.get("cnn.conv2.b")?)?;
            let e2 = tape.leaky_relu(z2, LEAKY_SLOPE)?;
            (e1, e2)
        }
    };
    let m = tape.concat_cols(e1, e2)?;
    let z = tape.linear(m, p.get("graph.agg.w")?, p.get("graph.agg.b")?)?;
    tape.leaky_relu(z, LEAKY_SLOPE)
}

/// Cluster tokens: shared linear embedding plus a learnable per-cluster row.
pub fn tokenize(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    let t = tape.linear(x, p.get("tf.tok.w")?, p.get("tf.tok.b")?)?;
    tape.add_tiled(t, p.get("tf.pos")?)
}

/// Single-head post-norm encoder layer over each subject's N tokens.
pub fn transformer_layer(tape: &mut Tape, p: &BoundParams, t: Var, batch: usize) -> Result<Var> {
    let d = tape.shape(t).1;
    let q = tape.linear(t, p.get("tf.q.w")?, p.get("tf.q.b")?)?;
    let k = tape.linear(t, p.get("tf.k.w")?, p.get("tf.k.b")?)?;
    let v = tape.linear(t, p.get("tf.v.w")?, p.get("tf.v.b")?)?;
    let logits = tape.block_matmul_nt(q, k, batch)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let attended = tape.block_matmul(weights, v, batch)?;
    let projected = tape.linear(attended, p.get("tf.o.w")?, p.get("tf.o.b")?)?;
    let r1 = tape.add(t, projected)?;
    let y = tape.layer_norm(r1, p.get("tf.ln1.g")?, p.get("tf.ln1.b")?, LAYER_NORM_EPS)?;
    let h = tape.linear(y, p.get("tf.ffn1.w")?, p.get("tf.ffn1.b")?)?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, p.get("tf.ffn2.w")?, p.get("tf.ffn2.b")?)?;
    let r2 = tape.add(y, h)?;
    tape.layer_norm(r2, p.get("tf.ln2.g")?, p.get("tf.ln2.b")?, LAYER_NORM_EPS)
}

/// `w1·fg + w2·ft`.
pub fn fuse(tape: &mut Tape, p: &BoundParams, fg: Var, ft: Var) -> Result<Var> {
    let a = tape.scale_by(fg, p.get("fusion.w1")?)?;
    let b = tape.scale_by(ft, p.get("fusion.w2")?)?;
    tape.add(a, b)
}

/// Per-cluster scores `sigmoid(w·[tanh(V f) ; sigmoid(U f)] + b)` and the
/// features scaled by them.
pub fn gated_attention(tape: &mut Tape, p: &BoundParams, f: Var) -> Result<(Var, Var)> {
    let u = tape.matmul(f, p.get("attn.v.w")?)?;
    let u = tape.tanh(u)?;
    let g = tape.matmul(f, p.get("attn.u.w")?)?;
    let g = tape.sigmoid(g)?;
    let ug = tape.concat_cols(u, g)?;
    let s = tape.linear(ug, p.get("attn.out.w")?, p.get("attn.out.b")?)?;
    let scores = tape.sigmoid(s)?;
    let attended = tape.mul_rowwise(f, scores)?;
    Ok((scores, attended))
}

/// Flatten each subject's N×d map and apply the two-layer head.
pub fn classify_head(tape: &mut Tape, p: &BoundParams, f: Var, batch: usize) -> Result<Var> {
    let (rows, d) = tape.shape(f);
    let flat = tape.reshape(f, batch, rows * d / batch)?;
    let h = tape.linear(flat, p.get("head.fc1.w")?, p.get("head.fc1.b")?)?;
    let h = tape.relu(h)?;
    tape.linear(h, p.get("head.fc2.w")?, p.get("head.fc2.b")?)
}

/// Full forward pass over `x` = (B·N)×3 stacked subject features.
pub fn forward(
    tape: &mut Tape,
    p: &BoundParams,
    config: &ModelConfig,
    neighbors: Option<&NeighborLists>,
    x: Var,
) -> Result<Forward> {
    let (rows, cols) = tape.shape(x);
    let n = config.n_clusters;
    if cols != config.in_features || rows == 0 || rows % n != 0 {
        return Err(Error::config(format!(
            "model input is {rows}×{cols}; expected (B·{n})×{}",
            config.in_features
        )));
    }
    let batch = rows / n;
    let graph_out = if config.streams.graph() {
        Some(graph_stream(tape, p, config, x, neighbors)?)
    } else {
        None
    };
    let transformer_out = if config.streams.transformer() {
        let t = tokenize(tape, p, x)?;
        Some(transformer_layer(tape, p, t, batch)?)
    } else {
        None
    };
    let fused = match (graph_out, transformer_out) {
        (Some(fg), Some(ft)) => fuse(tape, p, fg, ft)?,
        (Some(f), None) | (None, Some(f)) => f,
        (None, None) => return Err(Error::config("at least one stream must be enabled")),
    };
    let (scores, attended) = if config.use_attention {
        let (s, a) = gated_attention(tape, p, fused)?;
        (Some(s), a)
    } else {
        (None, fused)
    };
    let logits = classify_head(tape, p, attended, batch)?;
    Ok(Forward {
        logits,
        scores,
        graph_out,
        transformer_out,
        fused,
    })
}

/// Stack subjects into one (B·N)×3 row-major buffer.
pub fn stack_features(subjects: &[&SubjectFeatures]) -> Vec<f64> {
    subjects.iter().flat_map(|s| s.flat()).collect()
}

/// Raw fusion weights and their sum-to-one normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub raw: [f64; 2],
    /// `w / (w1 + w2)`; absent when the sum is zero.
    pub normalized: Option<[f64; 2]>,
}

impl FusionWeights {
    pub fn from_raw(w1: f64, w2: f64) -> Self {
        let sum = w1 + w2;
        let normalized = (sum != 0.0).then(|| [w1 / sum, w2 / sum]);
        Self {
            raw: [w1, w2],
            normalized,
        }
    }
}

/// One subject's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub predicted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

/// Configured model with its parameters and (optional) static graph.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    neighbors: Option<NeighborLists>,
}

/// Subjects per inference tape.
const PREDICT_BATCH: usize = 32;

impl Model {
    pub fn new(config: ModelConfig, graph: Option<&ClusterGraph>) -> Result<Self> {
        let config = config.validated()?;
        let params = init_params(&config);
        Self::with_params(config, params, graph)
    }

    pub fn with_params(config: ModelConfig, params: ParamSet, graph: Option<&ClusterGraph>) -> Result<Self> {
        let config = config.validated()?;
        for (name, rows, cols, _) in config.layout() {
            let a = params
                .get(&name)
                .ok_or_else(|| Error::input(format!("snapshot lacks parameter `{name}`")))?;
            if a.shape() != [rows, cols] {
                return Err(Error::input(format!(
                    "parameter `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    a.shape()
                )));
            }
        }
        let neighbors = if config.needs_graph() {
            let g = graph.ok_or_else(|| Error::config("the graph stream requires a graph file"))?;
            if g.n_nodes != config.n_clusters {
                return Err(Error::config(format!(
                    "graph has N = {} nodes but the cohort has N = {} clusters",
                    g.n_nodes, config.n_clusters
                )));
            }
            g.validate()?;
            Some(g.neighbor_lists())
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            neighbors,
        })
    }

    pub fn neighbors(&self) -> Option<&NeighborLists> {
        self.neighbors.as_ref()
    }

    /// Build the forward graph for `subjects` on `tape` with the current
    /// parameters bound as leaves.
    pub fn forward_on(&self, tape: &mut Tape, subjects: &[&SubjectFeatures]) -> Result<(BoundParams, Forward)> {
        let n = self.config.n_clusters;
        if let Some(s) = subjects.iter().find(|s| s.n_clusters() != n) {
            return Err(Error::input(format!(
                "subject {} has {} clusters, model expects {n}",
                s.subject_id,
                s.n_clusters()
            )));
        }
        let bound = self.params.bind(tape);
        let x = tape.constant(subjects.len() * n, N_CHANNELS, stack_features(subjects))?;
        let out = forward(tape, &bound, &self.config, self.neighbors.as_ref(), x)?;
        Ok((bound, out))
    }

    /// Logits, argmax class and attention scores for already-normalized
    /// subjects.
    pub fn predict(&self, subjects: &[&SubjectFeatures]) -> Result<Vec<Prediction>> {
        let n = self.config.n_clusters;
        let mut out = Vec::with_capacity(subjects.len());
        for chunk in subjects.chunks(PREDICT_BATCH) {
            let mut tape = Tape::new();
            let (_, fwd) = self.forward_on(&mut tape, chunk)?;
            let logits = tape.value(fwd.logits);
            let scores = fwd.scores.map(|s| tape.value(s).to_vec());
            for (b, _) in chunk.iter().enumerate() {
                let l = [logits[2 * b], logits[2 * b + 1]];
                if !l.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("logits for subject {}", chunk[b].subject_id)));
                }
                out.push(Prediction {
                    logits: l,
                    // ties go to class 0
                    predicted: usize::from(l[1] > l[0]),
                    attention: scores.as_ref().map(|s| s[b * n..(b + 1) * n].to_vec()),
                });
            }
        }
        Ok(out)
    }

    pub fn fusion_weights(&self) -> Option<FusionWeights> {
        let w1 = self.params.get("fusion.w1")?.values()[0];
        let w2 = self.params.get("fusion.w2")?.values()[0];
        Some(FusionWeights::from_raw(w1, w2))
    }
}

/// Everything needed to re-run a trained fold model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionWeights>,
    pub normalization: NormalizationParams,
    /// Path or digest of the graph the model was trained with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_ref: Option<String>,
    pub seed: u64,
}

impl ModelSnapshot {
    pub fn new(model: &Model, normalization: NormalizationParams, graph_ref: Option<String>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            config: model.config.clone(),
            params: model.params.clone(),
            fusion: model.fusion_weights(),
            normalization,
            graph_ref,
            seed: model.config.seed,
        }
    }

    pub fn into_model(self, graph: Option<&ClusterGraph>) -> Result<(Model, NormalizationParams)> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::input(format!(
                "unsupported model snapshot version {}",
                self.format_version
            )));
        }
        Ok((Model::with_params(self.config, self.params, graph)?, self.normalization))
    }
}
