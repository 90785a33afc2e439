//! Experiment orchestration: configuration, checkpoint persistence, the
//! run/grid drivers, and report emission.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DefenseConfig, EditTargetConfig, ExperimentConfig, ModelScale};
pub use report::{FactRecord, ResultsTable, TableRow};
pub use run::{grid, prepare_seed, run_experiment, GridOutput, RunOutput, SeedContext};
