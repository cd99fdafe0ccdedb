//! Experiment harness: configuration, model persistence, the comparison
//! table, the ε sweep, the two ablations, and their reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod svg;

pub use config::{ExperimentConfig, OUTPUT_ENV};
pub use error::{HarnessError, Result};
pub use experiment::{
    evaluation_images, load_models, run_ablations, run_cell, run_epsilon_sweep, run_table, train_models, Arm, EvalImage, Models,
};
pub use report::{ReportRow, SummaryRow};
