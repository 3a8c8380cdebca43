//! Synthetic scenes, metrics and the Monte-Carlo experiment runner.

mod data;
mod experiment;
mod metrics;

pub use data::*;
pub use experiment::*;
pub use metrics::*;
