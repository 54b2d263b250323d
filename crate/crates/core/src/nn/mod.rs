//! Minimal trainable layer stack: dense, 1-D convolution, bidirectional
//! peephole LSTM, MSE loss and Nesterov SGD with elementwise gradient
//! clipping.

mod activation;
pub mod checkpoint;
mod conv;
mod dense;
pub mod gradcheck;
pub mod init;
mod loss;
mod lstm;
mod network;
mod optim;
mod tensor;

pub use activation::ActivationFn;
pub use conv::{Border, Conv1d};
pub use dense::Dense;
pub use loss::mse;
pub use lstm::{Bidirectional, Lstm, DEFAULT_BPTT_STEPS};
pub use network::{Layer, LayerDesc, Network, Trace};
pub use optim::{clip_gradients, NesterovSgd, OptimizerConfig, PlateauSchedule, DEFAULT_CLIP, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// MSE loss of `network` on one batch, with gradients for every parameter.
pub fn loss_and_gradients<T: Scalar>(network: &Network<T>, input: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)> {
    let (pred, trace) = network.forward_train(input)?;
    let (loss, grad) = mse(&pred, target)?;
    if !loss.is_finite() {
        return Err(crate::Error::NonFinite { layer: "loss".into() });
    }
    let (grads, _) = network.backward(&trace, &grad)?;
    Ok((loss, grads))
}
