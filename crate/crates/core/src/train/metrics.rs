//! Macro-averaged binary classification metrics and the paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};

/// `−log softmax(logits)[label]`, evaluated with log-sum-exp.
pub fn cross_entropy(logits: [f64; 2], label: usize) -> f64 {
    log_sum_exp(&logits) - logits[label]
}

/// Two-sided 5% critical value of Student's t with 4 degrees of freedom
/// (the 5-fold case).
pub const T_CRITICAL_DF4: f64 = 2.7764451051977987;

/// Two-sided critical value `c` with `P(|T| > c) = alpha` for `df` degrees
/// of freedom.
pub fn t_critical(df: usize, alpha: f64) -> Result<f64> {
    if df == 4 && alpha == 0.05 {
        return Ok(T_CRITICAL_DF4);
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::config(e.to_string()))?;
    Ok(dist.inverse_cdf(1.0 - alpha / 2.0))
}

/// Macro metrics over the two classes; each lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "precision", "recall", "f1"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            _ => None,
        }
    }

    fn from_fn(mut f: impl FnMut(&str) -> f64) -> Self {
        Self {
            accuracy: f("accuracy"),
            precision: f("precision"),
            recall: f("recall"),
            f1: f("f1"),
        }
    }

    /// Per-metric mean.
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        Self::from_fn(|m| all.iter().filter_map(|x| x.get(m)).sum::<f64>() / n)
    }

    /// Per-metric sample standard deviation (n − 1); zero for fewer than two
    /// values.
    pub fn sd(all: &[Metrics]) -> Metrics {
        let mean = Self::mean(all);
        Self::from_fn(|m| {
            if all.len() < 2 {
                return 0.0;
            }
            let mu = mean.get(m).expect("known metric");
            let ss: f64 = all.iter().map(|x| (x.get(m).expect("known metric") - mu).powi(2)).sum();
            (ss / (all.len() - 1) as f64).sqrt()
        })
    }
}

/// `counts[label][prediction]`.
pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<[[usize; 2]; 2]> {
    if labels.len() != predictions.len() {
        return Err(Error::input(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut counts = [[0usize; 2]; 2];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y > 1 || p > 1 {
            return Err(Error::input(format!("class index out of range: label {y}, prediction {p}")));
        }
        counts[y][p] += 1;
    }
    Ok(counts)
}

/// Accuracy plus precision, recall and F1 averaged over the two classes.
///
/// A class that is never predicted has precision 0 (and a class that never
/// occurs has recall 0); per-class F1 is 0 when its precision and recall are
/// both 0.
pub fn macro_metrics(labels: &[usize], predictions: &[usize]) -> Result<Metrics> {
    let c = confusion(labels, predictions)?;
    let total = labels.len();
    if total == 0 {
        return Err(Error::input("metrics need at least one prediction"));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut p = [0.0; 2];
    let mut r = [0.0; 2];
    let mut f = [0.0; 2];
    for k in 0..2 {
        let tp = c[k][k];
        p[k] = ratio(tp, c[0][k] + c[1][k]);
        r[k] = ratio(tp, c[k][0] + c[k][1]);
        f[k] = if p[k] + r[k] > 0.0 {
            2.0 * p[k] * r[k] / (p[k] + r[k])
        } else {
            0.0
        };
    }
    Ok(Metrics {
        accuracy: ratio(c[0][0] + c[1][1], total),
        precision: (p[0] + p[1]) / 2.0,
        recall: (r[0] + r[1]) / 2.0,
        f1: (f[0] + f[1]) / 2.0,
    })
}

/// Paired t-test on per-fold values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    /// `mean(d) / (sd(d)/√n)`; `None` when unbounded (zero spread with a
    /// nonzero mean difference).
    pub t: Option<f64>,
    pub unbounded: bool,
    pub mean_difference: f64,
    pub df: usize,
    pub critical_value: f64,
    pub significant: bool,
}

/// Two-sided paired t-test of `a − b` at α = 0.05.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<PairedT> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::input("paired t-test needs at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let critical = t_critical(n - 1, 0.05)?;
    let (t, unbounded, significant) = if sd == 0.0 {
        if mean == 0.0 {
            (Some(0.0), false, false)
        } else {
            (None, true, true)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        (Some(t), false, t.abs() > critical)
    };
    Ok(PairedT {
        t,
        unbounded,
        mean_difference: mean,
        df: n - 1,
        critical_value: critical,
        significant,
    })
}
