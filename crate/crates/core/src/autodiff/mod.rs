//! Dense f64 arrays, a reverse-mode tape, Adam, and a finite-difference
//! gradient checker. Every model computation is expressed with these.

mod adam;
mod array;
mod gemm;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use array::DifferentiableArray;
pub use gemm::gemm;
pub use gradcheck::{grad_check, relative_error, Coordinates, GradCheckReport};
pub use params::{BoundParams, ParamSet, SNAPSHOT_FORMAT_VERSION};
pub use tape::{log_sum_exp, sigmoid, softmax_rows, NeighborLists, Tape, Var};

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
