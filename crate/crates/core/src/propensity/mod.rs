//! Differentiable convolutional propensity models.

mod checkpoint;
mod model;
pub(crate) mod net;
mod spec;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{forward, gradient_wrt_input, predict_batch, PropensityModel};
pub use spec::{Activation, ConvLayerSpec, ConvNetSpec, LrSchedule, Optimizer, Pool, TrainConfig};
pub use train::{batch_loss_and_gradient, bce_from_logit, mean_bce, standardize_head, train, train_from, TrainOutcome};
