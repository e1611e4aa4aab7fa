//! Mini-batch training, k-fold cross-validation, evaluation and run
//! comparison.

mod folds;
mod metrics;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use folds::{make_folds, FoldAssignment, DEFAULT_FOLDS};
pub use metrics::{
    confusion, cross_entropy, macro_metrics, paired_t, t_critical, Metrics, PairedT, T_CRITICAL_DF4,
};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::error::{Error, Result};
use crate::features::{apply_minmax, fit_minmax, Cohort, NormalizationParams, SubjectFeatures};
use crate::graph::{ClusterGraph, GraphKind};
use crate::model::{FusionWeights, Model, ModelConfig, ModelSnapshot};

pub const RESULTS_FORMAT_VERSION: u32 = 1;

/// A parameter excluded from optimization, optionally pinned to a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenParam {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_folds: usize,
    pub frozen: Vec<FrozenParam>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            n_folds: DEFAULT_FOLDS,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.n_folds < 2 {
            return Err(Error::config("n_folds must be at least 2"));
        }
        Ok(())
    }
}

/// A model trained on one fold's training split.
#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: Model,
    pub normalization: NormalizationParams,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Train on raw (unnormalized) subjects: min–max ranges are fitted on
/// `train` alone, then the model is optimized with Adam over seeded
/// shuffled mini-batches.
pub fn train_fold(
    train: &[&SubjectFeatures],
    graph: Option<&ClusterGraph>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedFold> {
    config.validate()?;
    let normalization = fit_minmax(train.iter().copied())?;
    let data: Vec<SubjectFeatures> = train.iter().map(|s| apply_minmax(s, &normalization)).collect();
    let mut model = Model::new(
        ModelConfig {
            seed,
            ..model_config.clone()
        },
        graph,
    )?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    for frozen in &config.frozen {
        let p = model
            .params
            .get_mut(&frozen.name)
            .ok_or_else(|| Error::config(format!("cannot freeze unknown parameter `{}`", frozen.name)))?;
        if let Some(v) = frozen.value {
            p.values_mut().fill(v);
        }
        adam.freeze(frozen.name.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let subjects: Vec<&SubjectFeatures> = batch.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let (bound, fwd) = model.forward_on(&mut tape, &subjects)?;
            let loss = tape.cross_entropy_mean(fwd.logits, &labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, batch {batch_no}"
                )));
            }
            tape.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&tape, &bound);
            adam.step(&mut model.params)?;
            total += value * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        debug!("seed {seed} epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainedFold {
        model,
        normalization,
        loss_history: history,
    })
}

/// Per-subject test outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub subject_id: String,
    pub fold: usize,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub logits: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

/// Normalize `test` with the training ranges and score the model.
pub fn evaluate(
    model: &Model,
    normalization: &NormalizationParams,
    test: &[&SubjectFeatures],
    fold: usize,
) -> Result<(Metrics, Vec<SubjectOutcome>)> {
    let normalized: Vec<SubjectFeatures> = test.iter().map(|s| apply_minmax(s, normalization)).collect();
    let refs: Vec<&SubjectFeatures> = normalized.iter().collect();
    let predictions = model.predict(&refs)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let metrics = macro_metrics(&labels, &predicted)?;
    let outcomes = test
        .iter()
        .zip(predictions)
        .map(|(s, p)| SubjectOutcome {
            subject_id: s.subject_id.clone(),
            fold,
            label: s.label,
            predicted: p.predicted,
            correct: p.predicted == s.label,
            logits: p.logits,
            attention: p.attention,
        })
        .collect();
    Ok((metrics, outcomes))
}

/// Everything produced for one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub test_indices: Vec<usize>,
    pub metrics: Metrics,
    pub loss_history: Vec<f64>,
    pub snapshot: ModelSnapshot,
    pub subjects: Vec<SubjectOutcome>,
}

/// Per-fold seed derived from the master seed.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    master.wrapping_add(fold as u64)
}

/// Train and test one fold of `assignment`.
pub fn run_fold(
    cohort: &Cohort,
    assignment: &FoldAssignment,
    fold: usize,
    graph: Option<&ClusterGraph>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    master_seed: u64,
) -> Result<FoldOutcome> {
    let seed = fold_seed(master_seed, fold);
    let train_idx = assignment.train_indices(fold);
    let test_idx = assignment.test_indices(fold);
    let train: Vec<&SubjectFeatures> = train_idx.iter().map(|&i| &cohort.subjects[i]).collect();
    let test: Vec<&SubjectFeatures> = test_idx.iter().map(|&i| &cohort.subjects[i]).collect();
    info!("fold {fold}: training on {} subjects (seed {seed})", train.len());
    let trained = train_fold(&train, graph, model_config, config, seed)?;
    let (metrics, subjects) = evaluate(&trained.model, &trained.normalization, &test, fold)?;
    info!(
        "fold {fold}: test accuracy {:.4} (final training loss {:.4})",
        metrics.accuracy,
        trained.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(FoldOutcome {
        fold,
        seed,
        n_train: train.len(),
        test_indices: test_idx,
        metrics,
        loss_history: trained.loss_history,
        snapshot: ModelSnapshot::new(&trained.model, trained.normalization, None),
        subjects,
    })
}

/// Outcome of a full cross-validation run.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldOutcome>,
}

/// Stratified k-fold cross-validation. Folds run on up to `workers` threads;
/// each fold is independent and seeded from `seed + fold`, so results do not
/// depend on the worker count.
pub fn cross_validate(
    cohort: &Cohort,
    graph: Option<&ClusterGraph>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    workers: usize,
) -> Result<CvRun> {
    config.validate()?;
    let model_config = model_config.clone().validated()?;
    if model_config.n_clusters != cohort.n_clusters {
        return Err(Error::config(format!(
            "model expects N = {} clusters but the cohort has N = {}",
            model_config.n_clusters, cohort.n_clusters
        )));
    }
    let assignment = make_folds(&cohort.labels(), config.n_folds, seed)?;
    let n_folds = config.n_folds;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FoldOutcome>>>> = Mutex::new((0..n_folds).map(|_| None).collect());
    let work = || loop {
        let fold = next.fetch_add(1, Ordering::SeqCst);
        if fold >= n_folds {
            break;
        }
        let r = run_fold(cohort, &assignment, fold, graph, &model_config, config, seed);
        slots.lock().expect("no panics while holding the lock")[fold] = Some(r);
    };
    let workers = workers.clamp(1, n_folds);
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let folds = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvRun { assignment, folds })
}

/// Graph provenance stored with results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub kind: GraphKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_tag: Option<String>,
    pub isolated_nodes: usize,
}

impl GraphInfo {
    pub fn of(graph: &ClusterGraph) -> Self {
        Self {
            kind: graph.kind,
            k: graph.k,
            metric_tag: graph.metric_tag.clone(),
            isolated_nodes: graph.isolated_nodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_weights: Option<FusionWeights>,
}

/// Fusion weights averaged over folds, and their normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub raw: [f64; 2],
    pub normalized: Option<[f64; 2]>,
}

/// The results file of one cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub format_version: u32,
    pub config_digest: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: ModelConfig,
    pub training: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphInfo>,
    pub stratified_folds: bool,
    pub folds: Vec<FoldRecord>,
    pub mean: Metrics,
    pub sd: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_weights: Option<FusionSummary>,
    /// Test outcomes of every subject, in cohort order.
    pub subjects: Vec<SubjectOutcome>,
}

impl RunResults {
    pub fn fold_metrics(&self) -> Vec<Metrics> {
        self.folds.iter().map(|f| f.metrics).collect()
    }

    pub fn has_attention(&self) -> bool {
        !self.subjects.is_empty() && self.subjects.iter().all(|s| s.attention.is_some())
    }
}

impl CvRun {
    pub fn fold_metrics(&self) -> Vec<Metrics> {
        self.folds.iter().map(|f| f.metrics).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        Metrics::mean(&self.fold_metrics()).accuracy
    }

    /// Test outcomes reordered to cohort order.
    pub fn subjects_in_cohort_order(&self) -> Vec<SubjectOutcome> {
        let mut indexed: Vec<(usize, &SubjectOutcome)> = self
            .folds
            .iter()
            .flat_map(|f| f.test_indices.iter().copied().zip(&f.subjects))
            .collect();
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn fusion_summary(&self) -> Option<FusionSummary> {
        let per_fold: Vec<FusionWeights> = self.folds.iter().filter_map(|f| f.snapshot.fusion).collect();
        if per_fold.is_empty() {
            return None;
        }
        let n = per_fold.len() as f64;
        let w1 = per_fold.iter().map(|f| f.raw[0]).sum::<f64>() / n;
        let w2 = per_fold.iter().map(|f| f.raw[1]).sum::<f64>() / n;
        let f = FusionWeights::from_raw(w1, w2);
        Some(FusionSummary {
            raw: f.raw,
            normalized: f.normalized,
        })
    }

    pub fn to_results(
        &self,
        config_digest: &str,
        seed: u64,
        name: Option<String>,
        training: &TrainConfig,
        graph: Option<GraphInfo>,
    ) -> RunResults {
        let metrics = self.fold_metrics();
        RunResults {
            format_version: RESULTS_FORMAT_VERSION,
            config_digest: config_digest.to_string(),
            seed,
            name,
            model: ModelConfig {
                seed,
                ..self.folds[0].snapshot.config.clone()
            },
            training: training.clone(),
            graph,
            stratified_folds: true,
            folds: self
                .folds
                .iter()
                .map(|f| FoldRecord {
                    fold: f.fold,
                    seed: f.seed,
                    n_train: f.n_train,
                    n_test: f.test_indices.len(),
                    metrics: f.metrics,
                    final_loss: f.loss_history.last().copied().unwrap_or(f64::NAN),
                    loss_history: f.loss_history.clone(),
                    fusion_weights: f.snapshot.fusion,
                })
                .collect(),
            mean: Metrics::mean(&metrics),
            sd: Metrics::sd(&metrics),
            fusion_weights: self.fusion_summary(),
            subjects: self.subjects_in_cohort_order(),
        }
    }
}

/// Paired t-tests between two runs on every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub n_folds: usize,
    pub tests: BTreeMap<String, PairedT>,
}

pub fn compare_runs(a: &RunResults, b: &RunResults, a_name: &str, b_name: &str) -> Result<Comparison> {
    compare_fold_metrics(&a.fold_metrics(), &b.fold_metrics(), a_name, b_name)
}

pub fn compare_fold_metrics(a: &[Metrics], b: &[Metrics], a_name: &str, b_name: &str) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "fold count mismatch: `{a_name}` has {} folds, `{b_name}` has {}",
            a.len(),
            b.len()
        )));
    }
    let mut tests = BTreeMap::new();
    for m in Metrics::NAMES {
        let xa: Vec<f64> = a.iter().map(|x| x.get(m).expect("known metric")).collect();
        let xb: Vec<f64> = b.iter().map(|x| x.get(m).expect("known metric")).collect();
        tests.insert(m.to_string(), paired_t(&xa, &xb)?);
    }
    Ok(Comparison {
        a: a_name.to_string(),
        b: b_name.to_string(),
        n_folds: a.len(),
        tests,
    })
}
