//! Soft-Dice training with Adam, plateau decay and best-epoch checkpoints;
//! source-domain pretraining of the backbone; the frozen-tensor check.

mod adam;
mod dice;
mod train;

pub use adam::{adam_step, OptimizerState};
pub use dice::{binarize, dice_loss, dice_loss_graph, hard_dice, set_dice, soft_dice, THRESHOLD};
pub use train::{
    freeze_verify, loss_log_csv, pretrain_backbone, sample_loss, train, write_loss_log, Checkpoint, EpochLog,
    FreezeReport, TrainConfig, TrainOutcome, REFERENCE_LR,
};
