//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{BoundParams, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Which parameter coordinates to perturb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coordinates {
    All,
    /// At most `per_param` seeded-random coordinates of each parameter.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crossed a kink (activation sign
    /// flip or max-pooling winner change); excluded from the maximum.
    pub non_smooth: usize,
}

/// Below this magnitude `|a| + |n|`, errors are measured absolutely: the
/// finite-difference estimate itself carries roundoff of about this size.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-7;

/// `|a − n| / max(RELATIVE_ERROR_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compare analytic gradients of the scalar `f` against the fourth-order
/// central difference with step `eps` at `point`.
pub fn grad_check<F>(f: F, point: &ParamSet, eps: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let evaluate = |params: &ParamSet| -> Result<(f64, Option<u64>)> {
        let mut tape = Tape::with_branch_tracking();
        let bound = params.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok((tape.scalar(loss), tape.branch_signature()))
    };

    let mut tape = Tape::with_branch_tracking();
    let bound = point.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("objective is not finite at the base point".into()));
    }
    let base_signature = tape.branch_signature();
    tape.backward(loss)?;

    let mut work = point.clone();
    let names: Vec<String> = point.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        non_smooth: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        let analytic = tape.grad(bound.get(name)?);
        let len = analytic.len();
        let indices: Vec<usize> = match coords {
            Coordinates::All => (0..len).collect(),
            Coordinates::Sample { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pi as u64));
                let mut idx = sample(&mut rng, len, per_param.min(len)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in indices {
            let original = work.get(name).expect("name from point").values()[i];
            let mut eval_at = |x: f64| -> Result<(f64, Option<u64>)> {
                work.get_mut(name).expect("name").values_mut()[i] = x;
                let r = evaluate(&work);
                work.get_mut(name).expect("name").values_mut()[i] = original;
                let (v, sig) = r?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective is {v} with `{name}`[{i}] perturbed to {x}"
                    )));
                }
                Ok((v, sig))
            };
            let mut f = [0.0; 4];
            let mut smooth = true;
            for (slot, step) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
                let (v, sig) = eval_at(original + step * eps)?;
                *slot = v;
                smooth &= sig == base_signature;
            }
            if !smooth {
                report.non_smooth += 1;
                continue;
            }
            let numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
