//! Optimisation, evaluation, persistence and verification tooling.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::TrainConfig;
pub use trainer::{evaluate, prepare, Evaluation, Prepared, StepLog, Trainer};
