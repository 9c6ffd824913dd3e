//! Deep Cox risk scorer over embedding bags: projection → ReLU → dropout →
//! multi-head (Nyström) attention → mean pooling → linear risk head, trained
//! with the event-averaged negative log partial likelihood.

mod attention;
mod checkpoint;
mod model;
mod tape;
mod train;

pub use attention::{exact_attention, landmark_segments, nystrom_attention, nystrom_attention_forced};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sidecar_path, CHECKPOINT_MAGIC,
};
pub use model::{
    cox_nll, cox_nll_and_grad, finite_diff_check, loss_and_gradient, DeepCoxConfig, DeepCoxModel, Mode,
    PARAM_NAMES,
};
pub use train::{train_deep_cox, EpochLog, TrainOutcome};
