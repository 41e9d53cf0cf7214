use super::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor and its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    value: Tensor,
    momentum: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            value,
            momentum,
        }
    }

    pub fn with_momentum(name: impl Into<String>, value: Tensor, momentum: Tensor) -> Result<Self> {
        if value.shape() != momentum.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter",
                lhs: value.shape().to_vec(),
                rhs: momentum.shape().to_vec(),
            });
        }
        Ok(Parameter {
            name: name.into(),
            value,
            momentum,
        })
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn momentum(&self) -> &Tensor {
        &self.momentum
    }
}

/// SGD with heavy-ball momentum: `buf = momentum * buf + grad; value -= lr * buf`.
///
/// All gradients are validated before any parameter is touched, so a rejected
/// step leaves the parameters unchanged.
pub fn sgd_step(params: &mut [Parameter], grads: &[Tensor], lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: lr {lr} must be positive and momentum {momentum} in [0, 1)"
        )));
    }
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", p.name),
            });
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let buf = p.momentum.data_mut();
        for (b, &gi) in buf.iter_mut().zip(g.data()) {
            *b = momentum * *b + gi;
        }
        let buf = p.momentum.data();
        for (v, &b) in p.value.data_mut().iter_mut().zip(buf) {
            *v -= lr * b;
        }
    }
    Ok(())
}
