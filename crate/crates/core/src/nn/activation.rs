use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Linear,
    Relu,
    Tanh,
}

impl ActivationFn {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationFn::Linear => x,
            ActivationFn::Relu => x.max(T::zero()),
            ActivationFn::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            ActivationFn::Linear => T::one(),
            ActivationFn::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationFn::Tanh => T::one() - y * y,
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
