//! Loss assembly, the training loop, checkpointed resume and the ablation
//! matrix.

pub mod config;
pub mod loss;
pub mod run;

pub use config::TrainConfig;
pub use loss::{example_losses, total_loss, Example, LossBreakdown, LossWeights};
pub use run::{
    ablate, normalization_stats, train_run, variant_checkpoint, RunDir, TrainLogRecord, TrainOutcome, Trainer, LOG_FILE, MODEL_FILE,
    STATE_FILE,
};

#[cfg(test)]
mod tests;
