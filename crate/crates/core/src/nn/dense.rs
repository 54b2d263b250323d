use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;

use super::{init, ActivationFn, Tensor};

/// Fully connected layer applied independently to every `[batch, time]` row:
/// `y = act(x W + b)` with `W` of shape `[input_dim, output_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: ActivationFn,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, activation: ActivationFn, rng: &mut R) -> Self {
        Dense {
            weights: init::glorot_uniform(&[input_dim, output_dim], input_dim, output_dim, rng),
            bias: Tensor::zeros(&[output_dim]),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let (b, t, c) = input.dims3("dense")?;
        if c != self.input_dim() {
            return Err(crate::Error::dim("dense", format!("{} input features", self.input_dim()), c));
        }
        let rows = b * t;
        let out_dim = self.output_dim();
        let mut out = Tensor::zeros(&[b, t, out_dim]);
        {
            let z = out.data_mut();
            for row in z.chunks_exact_mut(out_dim) {
                row.copy_from_slice(self.bias.data());
            }
            T::gemm(false, false, rows, c, out_dim, T::one(), input.data(), self.weights.data(), T::one(), z);
            if self.activation != ActivationFn::Linear {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        let cache = DenseCache {
            input: input.clone(),
            output: out.clone(),
        };
        Ok((out, cache))
    }

    /// Accumulates `[dW, db]` into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &DenseCache<T>, grad_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let (b, t, c) = cache.input.dims3("dense")?;
        let rows = b * t;
        let out_dim = self.output_dim();
        let mut dz = grad_out.clone();
        if self.activation != ActivationFn::Linear {
            for (g, &y) in dz.data_mut().iter_mut().zip(cache.output.data()) {
                *g *= self.activation.derivative_from_output(y);
            }
        }
        let (dw, rest) = grads.split_at_mut(1);
        T::gemm(true, false, c, rows, out_dim, T::one(), cache.input.data(), dz.data(), T::one(), dw[0].data_mut());
        let db = rest[0].data_mut();
        for row in dz.data().chunks_exact(out_dim) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = Tensor::zeros(&[b, t, c]);
        T::gemm(false, true, rows, out_dim, c, T::one(), dz.data(), self.weights.data(), T::zero(), dx.data_mut());
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}
