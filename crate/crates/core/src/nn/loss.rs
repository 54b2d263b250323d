use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Mean squared error over every element of the batch, and its gradient
/// with respect to `prediction`.
pub fn mse<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::dim(
            "mse",
            format!("{:?}", prediction.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let n = T::lit(prediction.len().max(1) as f64);
    let two = T::lit(2.0);
    let mut grad = Tensor::zeros(prediction.shape());
    let mut sum = T::zero();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(prediction.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g = two * d / n;
    }
    Ok((sum / n, grad))
}
