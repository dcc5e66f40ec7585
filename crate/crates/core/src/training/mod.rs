//! Losses, optimiser, learning-rate schedule, synthetic data and the
//! training loop.

mod data;
mod loss;
mod optim;
mod schedule;
mod train;

pub use data::{heldout_seed, item_seed, make_synthetic_pair, power, CLEAN_RMS, NO_NOISE};
pub use loss::{
    loss_audio, loss_audio_on_tape, loss_combined, loss_combined_on_tape, loss_spectral, loss_spectral_on_tape,
    LossConfig, LossParts, SpectralLossMode,
};
pub use optim::{adam_step, clip_gradients, global_norm, AdamConfig, TrainState};
pub use schedule::{lr_schedule, ScheduleConfig};
pub use train::{
    batch_gradients, block_means, evaluate, heldout_pairs, train, train_step, training_batch, EvalRecord, History,
    StepRecord, TrainConfig,
};
