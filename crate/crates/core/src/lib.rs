//! Fiber-cluster graph construction and hybrid Graph-CNN/Transformer
//! classification of white matter features, with gated-attention
//! interpretation and a synthetic-cohort harness.

pub mod autodiff;
pub mod error;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod interpret;
pub mod io;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
