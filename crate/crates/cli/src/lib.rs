//! File formats, run configuration, the single-image pipeline and ablation sweeps
//! behind the `texdiff` command.

pub mod config;
pub mod io;
pub mod pipeline;
pub mod sweep;
