use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::conv::{Border, Conv1d, ConvCache};
use super::dense::{Dense, DenseCache};
use super::lstm::{Bidirectional, BidirectionalCache};
use super::{ActivationFn, Tensor};

/// One stage of a sequential network operating on `[batch, time, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv1d(Conv1d<T>),
    BiLstm(Bidirectional<T>),
    /// Reinterprets `[b, t, c]` as `[b, time, channels]`; `t * c` must match.
    Reshape { time: usize, channels: usize },
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Dense(DenseCache<T>),
    Conv1d(ConvCache<T>),
    BiLstm(BidirectionalCache<T>),
    Reshape(Vec<usize>),
}

/// Structural description of a layer, used for audits and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerDesc {
    Dense {
        units: usize,
        activation: ActivationFn,
    },
    Conv1d {
        filter_size: usize,
        stride: usize,
        filters: usize,
        activation: ActivationFn,
        border: Border,
    },
    Bilstm {
        units: usize,
        peepholes: bool,
    },
    Reshape {
        time: usize,
        channels: usize,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv1d(_) => "conv1d",
            Layer::BiLstm(_) => "bilstm",
            Layer::Reshape { .. } => "reshape",
        }
    }

    pub fn describe(&self) -> LayerDesc {
        match self {
            Layer::Dense(d) => LayerDesc::Dense {
                units: d.output_dim(),
                activation: d.activation,
            },
            Layer::Conv1d(c) => LayerDesc::Conv1d {
                filter_size: c.filter_size(),
                stride: c.stride,
                filters: c.filters(),
                activation: c.activation,
                border: c.border,
            },
            Layer::BiLstm(b) => LayerDesc::Bilstm {
                units: b.hidden_size(),
                peepholes: true,
            },
            Layer::Reshape { time, channels } => LayerDesc::Reshape {
                time: *time,
                channels: *channels,
            },
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        Ok(match self {
            Layer::Dense(d) => {
                let (y, c) = d.forward(input)?;
                (y, LayerCache::Dense(c))
            }
            Layer::Conv1d(l) => {
                let (y, c) = l.forward(input)?;
                (y, LayerCache::Conv1d(c))
            }
            Layer::BiLstm(l) => {
                let (y, c) = l.forward(input)?;
                (y, LayerCache::BiLstm(c))
            }
            Layer::Reshape { time, channels } => {
                let (b, t, c) = input.dims3("reshape")?;
                if t * c != time * channels {
                    return Err(Error::dim("reshape", format!("{} values per item", time * channels), t * c));
                }
                let y = input.clone().reshape(&[b, *time, *channels])?;
                (y, LayerCache::Reshape(input.shape().to_vec()))
            }
        })
    }

    pub fn backward(&self, cache: &LayerCache<T>, grad_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::Dense(l), LayerCache::Dense(c)) => l.backward(c, grad_out, grads),
            (Layer::Conv1d(l), LayerCache::Conv1d(c)) => l.backward(c, grad_out, grads),
            (Layer::BiLstm(l), LayerCache::BiLstm(c)) => l.backward(c, grad_out, grads),
            (Layer::Reshape { .. }, LayerCache::Reshape(shape)) => grad_out.clone().reshape(shape),
            _ => Err(Error::dim(self.kind(), "matching forward cache", "cache of another layer")),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Dense(l) => l.params(),
            Layer::Conv1d(l) => l.params(),
            Layer::BiLstm(l) => l.params(),
            Layer::Reshape { .. } => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(l) => l.params_mut(),
            Layer::Conv1d(l) => l.params_mut(),
            Layer::BiLstm(l) => l.params_mut(),
            Layer::Reshape { .. } => Vec::new(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Dense(_) | Layer::Conv1d(_) => &["weights", "bias"],
            Layer::BiLstm(_) => &[
                "forward.input_weights",
                "forward.hidden_weights",
                "forward.bias",
                "forward.peepholes",
                "backward.input_weights",
                "backward.hidden_weights",
                "backward.bias",
                "backward.peepholes",
            ],
            Layer::Reshape { .. } => &[],
        }
    }
}

/// Sequential stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
}

/// Cached activations of a training forward pass.
pub struct Trace<T> {
    caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Network { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn describe(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(Layer::describe).collect()
    }

    fn label(i: usize, layer: &Layer<T>) -> String {
        format!("layer {i} ({})", layer.kind())
    }

    /// Inference pass; does not retain intermediate activations.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward(&x).map_err(|e| relabel(e, i, layer))?;
            y.ensure_finite(&Self::label(i, layer))?;
            x = y;
        }
        Ok(x)
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(&x).map_err(|e| relabel(e, i, layer))?;
            y.ensure_finite(&Self::label(i, layer))?;
            caches.push(c);
            x = y;
        }
        Ok((x, Trace { caches }))
    }

    /// Gradients for every parameter (in [`Network::params`] order) and the
    /// gradient with respect to the input.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut grads: Vec<Tensor<T>> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.params().len();
        }
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let np = layer.params().len();
            let slot = &mut grads[offsets[i]..offsets[i] + np];
            g = layer.backward(&trace.caches[i], &g, slot).map_err(|e| relabel(e, i, layer))?;
            let label = Self::label(i, layer);
            g.ensure_finite(&label)?;
            for t in slot.iter() {
                t.ensure_finite(&label)?;
            }
        }
        Ok((grads, g))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// `(layer index, parameter name, tensor)` for every parameter.
    pub fn named_params(&self) -> Vec<(usize, &'static str, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names().iter().copied().zip(l.params()).map(move |(n, p)| (i, n, p)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_params(&mut self) {
        for p in self.params_mut() {
            p.fill(T::zero());
        }
    }

    /// Sets the truncation horizon of every recurrent layer.
    pub fn set_bptt_steps(&mut self, steps: Option<usize>) {
        for l in &mut self.layers {
            if let Layer::BiLstm(b) = l {
                b.set_bptt_steps(steps);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    weights: d.weights.cast(),
                    bias: d.bias.cast(),
                    activation: d.activation,
                }),
                Layer::Conv1d(c) => Layer::Conv1d(Conv1d {
                    weights: c.weights.cast(),
                    bias: c.bias.cast(),
                    stride: c.stride,
                    border: c.border,
                    activation: c.activation,
                }),
                Layer::BiLstm(b) => {
                    let cast_lstm = |l: &super::Lstm<T>| super::Lstm {
                        input_weights: l.input_weights.cast(),
                        hidden_weights: l.hidden_weights.cast(),
                        bias: l.bias.cast(),
                        peepholes: l.peepholes.cast(),
                        reverse: l.reverse,
                        bptt_steps: l.bptt_steps,
                    };
                    Layer::BiLstm(Bidirectional {
                        forward: cast_lstm(&b.forward),
                        backward: cast_lstm(&b.backward),
                    })
                }
                Layer::Reshape { time, channels } => Layer::Reshape {
                    time: *time,
                    channels: *channels,
                },
            })
            .collect();
        Network { layers }
    }
}

fn relabel<T: Scalar>(e: Error, i: usize, layer: &Layer<T>) -> Error {
    match e {
        Error::Dimension { expected, found, .. } => Error::Dimension {
            layer: format!("layer {i} ({})", layer.kind()),
            expected,
            found,
        },
        other => other,
    }
}
