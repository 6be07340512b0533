//! Randomized-pause training: one pause event per batch, main plus weighted
//! auxiliary loss, Adam or polynomial SGD, exact checkpoint/resume.

mod checkpoint;
mod config;
mod optim;
mod step;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{sample_pause_event, Baseline, OptimizerKind, PauseEvent, TrainConfig};
pub use optim::OptimizerState;
pub use step::{build_loss, train_step, BatchSource, LossGraph, StepReport, Trainer};

#[cfg(test)]
mod tests;
