//! Everything around the numeric core: datasets, checkpoints, TOML
//! configuration, stage orchestration and report files.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{ExperimentConfig, ResolvedBudget, Stage};
pub use dataset::{gen_dataset, load_csv, Dataset, DatasetKind, Split};
pub use gradcheck::{gradcheck, GradcheckSummary};
pub use pipeline::{load_config, run_config, run_experiment, RunOptions, RunSummary};
pub use report::emit_report;
