//! Training, evaluation, sweeps and checkpoints.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use ablate::{ablate, expand_grid, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::{LrSchedule, RunConfig};
pub use gradcheck::{grad_check, GradCheck};
pub use optim::AdamW;
pub use train::{evaluate, evaluate_episodes, load_dataset, train, Evaluation, TrainReport};
