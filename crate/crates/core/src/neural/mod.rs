//! Frequency-shared two-layer LSTM with a linear dense head.
//!
//! Inference runs in `f32` with batched stepping (one row per frequency
//! bin). Training and gradient checking are generic over `f32`/`f64`.

mod adam;
mod bidir;
mod bptt;
mod fused;
mod gradcheck;
mod kernel;
mod lstm;
mod model;
mod real;
mod train;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use bidir::BiNetwork;
pub use bptt::{
    batch_loss, finish_mean, grad_sum, grad_sum_indexed, loss_and_gradients, mse_loss, GradSum, Trainable,
    DEFAULT_CHUNK,
};
pub use fused::{FusedNetwork, FusedState};
pub use gradcheck::{gradient_check, random_samples, relative_error, tiny_gradient_check, GradCheckReport, FD_STEP, REL_FLOOR};
pub use lstm::{lstm_cell_step, step_batch, LayerState, LstmLayerParams};
pub use model::{count_parameters, DenseParams, LstmState, ModelBundle, NetConfig, Network, TENSOR_NAMES};
pub use real::{exp_f32, tanh_f32, Real};
pub use train::{grad_norm, train, train_with, EpochLog, StepInfo, TrainConfig, TrainOutcome};
