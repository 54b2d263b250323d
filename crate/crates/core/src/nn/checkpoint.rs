use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Network, Tensor};

/// One named parameter tensor, stored in `f64` regardless of the network's
/// scalar type (exact for `f32`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn export_params<T: Scalar>(network: &Network<T>) -> Vec<TensorRecord> {
    network
        .named_params()
        .into_iter()
        .map(|(layer, name, t)| TensorRecord {
            layer,
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.to_f64(),
        })
        .collect()
}

/// Copies stored tensors into a network of identical structure. Any missing,
/// extra, misnamed or mis-shaped tensor is an error and leaves the network
/// untouched.
pub fn import_params<T: Scalar>(network: &mut Network<T>, records: &[TensorRecord]) -> Result<()> {
    let expected = network.named_params();
    if expected.len() != records.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            records.len()
        )));
    }
    let mut staged = Vec::with_capacity(records.len());
    for ((layer, name, t), r) in expected.iter().zip(records) {
        if *layer != r.layer || *name != r.name {
            return Err(Error::Checkpoint(format!(
                "expected layer {layer} tensor {name}, found layer {} tensor {}",
                r.layer, r.name
            )));
        }
        if t.shape() != r.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for layer {layer} {name}: network {:?}, checkpoint {:?}",
                t.shape(),
                r.shape
            )));
        }
        let tensor = Tensor::<T>::from_f64(&r.shape, &r.data)
            .map_err(|_| Error::Checkpoint(format!("layer {layer} {name}: data length does not match shape")))?;
        tensor.ensure_finite(&format!("checkpoint layer {layer} {name}"))?;
        staged.push(tensor);
    }
    for (p, t) in network.params_mut().into_iter().zip(staged) {
        *p = t;
    }
    Ok(())
}
