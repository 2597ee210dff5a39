//! Operational shell around the SDTR pipeline: run configuration, data
//! splits, AdamW training, evaluation under test-time perturbations,
//! ablation and robustness sweeps, and figure output.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod optim;
pub mod plot;
pub mod robustness;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
