//! Central finite-difference check of backpropagated MSE gradients.

use super::{mse, Network, Tensor};
use crate::error::Result;

/// Denominator floor so that gradients that are both ~0 compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `layer/param[index]` or `input[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn loss(network: &Network<f64>, input: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    Ok(mse(&network.forward(input)?, target)?.0)
}

/// Compares every parameter and input gradient with
/// `(L(x + eps) - L(x - eps)) / 2 eps`. `stride` > 1 checks every
/// `stride`-th element of each tensor only.
pub fn check_gradients(network: &Network<f64>, input: &Tensor<f64>, target: &Tensor<f64>, eps: f64, stride: usize) -> Result<GradCheck> {
    let stride = stride.max(1);
    let (pred, trace) = network.forward_train(input)?;
    let (_, grad_out) = mse(&pred, target)?;
    let (param_grads, input_grad) = network.backward(&trace, &grad_out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: String, a: f64, n: f64| {
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = name;
        }
    };

    let names: Vec<String> = network.named_params().iter().map(|(l, n, _)| format!("{l}/{n}")).collect();
    let mut probe = network.clone();
    for (k, g) in param_grads.iter().enumerate() {
        for i in (0..g.len()).step_by(stride) {
            let orig = probe.params()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + eps;
            let up = loss(&probe, input, target)?;
            probe.params_mut()[k].data_mut()[i] = orig - eps;
            let down = loss(&probe, input, target)?;
            probe.params_mut()[k].data_mut()[i] = orig;
            record(format!("{}[{i}]", names[k]), g.data()[i], (up - down) / (2.0 * eps));
        }
    }

    let mut x = input.clone();
    for i in (0..x.len()).step_by(stride) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = loss(network, &x, target)?;
        x.data_mut()[i] = orig - eps;
        let down = loss(network, &x, target)?;
        x.data_mut()[i] = orig;
        record(format!("input[{i}]"), input_grad.data()[i], (up - down) / (2.0 * eps));
    }
    Ok(report)
}
