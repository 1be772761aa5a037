//! Experiment configuration, training loop, protocol suites and the
//! invariant audit.

mod config;
pub mod results;
mod runner;
pub mod suites;
mod train;
pub mod verify;

pub use config::{ExperimentConfig, Ini};
pub use results::{ResultRow, ResultsWriter, CSV_HEADER};
pub use runner::{RunRecord, Runner};
pub use train::{evaluate, train, train_with, EpochLog, Evaluation, TrainOutcome};
