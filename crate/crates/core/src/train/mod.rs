//! Optimization: Adam, cosine learning-rate schedule, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, TrainState};
pub use config::TrainConfig;
pub use schedule::cosine_lr;
pub use trainer::{evaluate, StepRecord, TrainPair, Trainer, LOSS_CSV_HEADER};
