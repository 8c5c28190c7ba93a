// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer: parameters, hooked forward pass, training and
//! answer scoring.

pub mod backward;
pub mod config;
pub mod forward;
pub mod score;
pub mod train;
pub mod weights;

pub use backward::{loss_and_grad, mean_loss};
pub use config::ModelConfig;
pub use forward::{
    forward_logits, forward_with_hooks, log_softmax_at, ActivationTrace, HookAction, HookSite,
    HookSpec, PositionMask,
};
pub use score::{argmax_first, rank_answers, score_answers, score_completion};
pub use train::{train_lm, LossCurve, Optimizer, TrainConfig};
pub use weights::{build_model, load_weights, save_weights, LayerWeights, ModelWeights};
