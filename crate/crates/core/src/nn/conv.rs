use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{init, ActivationFn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    /// Zero padding of `filter_size - 1` in total, the odd sample going
    /// right; output length equals input length (stride 1 only).
    Same,
    /// No padding; output length `(L - filter_size) / stride + 1`.
    Valid,
}

/// 1-D cross-correlation over the time axis. Weights are `[filter_size,
/// in_channels, filters]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub border: Border,
    pub activation: ActivationFn,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    output: Tensor<T>,
    input_dims: (usize, usize, usize),
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        filter_size: usize,
        stride: usize,
        filters: usize,
        border: Border,
        activation: ActivationFn,
        rng: &mut R,
    ) -> Result<Self> {
        if filter_size == 0 || stride == 0 || filters == 0 {
            return Err(Error::InvalidParams("conv1d sizes must be positive".into()));
        }
        if border == Border::Same && stride != 1 {
            return Err(Error::InvalidParams("conv1d `same` border requires stride 1".into()));
        }
        Ok(Conv1d {
            weights: init::glorot_uniform(
                &[filter_size, in_channels, filters],
                filter_size * in_channels,
                filter_size * filters,
                rng,
            ),
            bias: Tensor::zeros(&[filters]),
            stride,
            border,
            activation,
        })
    }

    pub fn filter_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[2]
    }

    fn left_pad(&self) -> usize {
        match self.border {
            Border::Same => (self.filter_size() - 1) / 2,
            Border::Valid => 0,
        }
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        let k = self.filter_size();
        match self.border {
            Border::Same => Ok(len),
            Border::Valid if len >= k => Ok((len - k) / self.stride + 1),
            Border::Valid => Err(Error::dim("conv1d", format!("at least {k} time steps"), len)),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (b, len, cin) = input.dims3("conv1d")?;
        if cin != self.in_channels() {
            return Err(Error::dim("conv1d", format!("{} input channels", self.in_channels()), cin));
        }
        let out_len = self.output_len(len)?;
        let (k, f) = (self.filter_size(), self.filters());
        let pad = self.left_pad() as isize;
        let width = k * cin;
        let rows = b * out_len;
        let x = input.data();
        let mut cols = vec![T::zero(); rows * width];
        for bi in 0..b {
            for t in 0..out_len {
                let row = &mut cols[(bi * out_len + t) * width..][..width];
                for kk in 0..k {
                    let src = (t * self.stride + kk) as isize - pad;
                    if src >= 0 && (src as usize) < len {
                        let from = (bi * len + src as usize) * cin;
                        row[kk * cin..(kk + 1) * cin].copy_from_slice(&x[from..from + cin]);
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[b, out_len, f]);
        {
            let z = out.data_mut();
            for row in z.chunks_exact_mut(f) {
                row.copy_from_slice(self.bias.data());
            }
            T::gemm(false, false, rows, width, f, T::one(), &cols, self.weights.data(), T::one(), z);
            if self.activation != ActivationFn::Linear {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        let cache = ConvCache {
            cols,
            output: out.clone(),
            input_dims: (b, len, cin),
        };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &ConvCache<T>, grad_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let (b, len, cin) = cache.input_dims;
        let (_, out_len, f) = grad_out.dims3("conv1d")?;
        let k = self.filter_size();
        let width = k * cin;
        let rows = b * out_len;
        let mut dz = grad_out.clone();
        if self.activation != ActivationFn::Linear {
            for (g, &y) in dz.data_mut().iter_mut().zip(cache.output.data()) {
                *g *= self.activation.derivative_from_output(y);
            }
        }
        let (dw, rest) = grads.split_at_mut(1);
        T::gemm(true, false, width, rows, f, T::one(), &cache.cols, dz.data(), T::one(), dw[0].data_mut());
        let db = rest[0].data_mut();
        for row in dz.data().chunks_exact(f) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dcols = vec![T::zero(); rows * width];
        T::gemm(false, true, rows, f, width, T::one(), dz.data(), self.weights.data(), T::zero(), &mut dcols);
        let pad = self.left_pad() as isize;
        let mut dx = Tensor::zeros(&[b, len, cin]);
        let dxd = dx.data_mut();
        for bi in 0..b {
            for t in 0..out_len {
                let row = &dcols[(bi * out_len + t) * width..][..width];
                for kk in 0..k {
                    let src = (t * self.stride + kk) as isize - pad;
                    if src >= 0 && (src as usize) < len {
                        let to = (bi * len + src as usize) * cin;
                        for c in 0..cin {
                            dxd[to + c] += row[kk * cin + c];
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}
