//! Subcommand implementations behind the `tractgraph` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_compare, cmd_gen, cmd_graph, cmd_interpret, cmd_sweep, cmd_train};
pub use config::{load, Loaded, Overrides, RunConfig};
