//! Drafter training against a frozen target, plus target pretraining.

mod objective;
mod optim;
mod train;

pub use objective::{
    batch_loss, compute_losses, loss_positions, sequence_loss, LossWeights, Losses, TeacherSeq,
};
pub use optim::{lr_at, optimizer_step, AdamWConfig, OptimState, Schedule};
pub use train::{
    head_accuracy, holdout_split, pretrain_target, rank, train, EpochStats, HeadAccuracy, HeadScorer, PretrainConfig, TrainConfig,
    TrainReport, REPORT_TOP_NS,
};

#[cfg(test)]
mod tests;
