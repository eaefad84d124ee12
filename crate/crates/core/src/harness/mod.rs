//! Configuration, task generation, experiment orchestration, checkpoints
//! and metrics.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod task;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{ConfigErrors, ExperimentConfig, Violation};
pub use experiment::{evaluate, mask_study, order_sweep, pe_sweep, run_experiment, train, EvalSummary, Trained};
pub use task::{bayes_rate, generate_task, TaskData, TaskSpec};
