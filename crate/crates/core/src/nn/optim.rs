use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_CLIP: f64 = 10.0;

/// Elementwise clamp of every gradient into `[-bound, bound]`.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], bound: T) {
    for g in grads {
        for x in g.data_mut() {
            *x = x.max(-bound).min(bound);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauSchedule {
    /// Steps between checks of the smoothed loss.
    pub patience: usize,
    /// Multiplier applied to the learning rate on a plateau.
    pub factor: f64,
    /// Relative improvement below which the loss counts as flat.
    pub min_improvement: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            patience: 1000,
            factor: 0.5,
            min_improvement: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub plateau: Option<PlateauSchedule>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            plateau: Some(PlateauSchedule::default()),
        }
    }
}

/// SGD with Nesterov momentum:
///
/// ```text
/// v <- mu * v - lr * g
/// p <- p + mu * v - lr * g
/// ```
#[derive(Debug, Clone)]
pub struct NesterovSgd<T> {
    learning_rate: T,
    momentum: T,
    velocity: Vec<Tensor<T>>,
    plateau: Option<PlateauSchedule>,
    best_loss: Option<f64>,
    last_check: usize,
}

impl<T: Scalar> NesterovSgd<T> {
    pub fn new(config: &OptimizerConfig) -> Self {
        NesterovSgd {
            learning_rate: T::lit(config.learning_rate),
            momentum: T::lit(config.momentum),
            velocity: Vec::new(),
            plateau: config.plateau,
            best_loss: None,
            last_check: 0,
        }
    }

    pub fn learning_rate(&self) -> T {
        self.learning_rate
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer", format!("{} gradients", params.len()), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let (mu, lr) = (self.momentum, self.learning_rate);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi - lr * gi;
                *pi += mu * *vi - lr * gi;
            }
        }
        Ok(())
    }

    /// Feeds the smoothed training loss after `step` updates; halves (by
    /// `factor`) the learning rate when it has stopped improving. Returns
    /// true when the rate changed.
    pub fn observe(&mut self, step: usize, smoothed_loss: f64) -> bool {
        let Some(p) = self.plateau else { return false };
        if step < self.last_check + p.patience {
            return false;
        }
        self.last_check = step;
        match self.best_loss {
            Some(best) if smoothed_loss > best * (1.0 - p.min_improvement) => {
                self.learning_rate *= T::lit(p.factor);
                self.best_loss = Some(best.min(smoothed_loss));
                true
            }
            _ => {
                self.best_loss = Some(smoothed_loss);
                false
            }
        }
    }
}
