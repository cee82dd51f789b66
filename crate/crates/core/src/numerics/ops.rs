//! Forward-only kernels. The differentiable versions on [`super::Tape`] reuse these.

use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

/// Standard self-normalizing SELU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Standard self-normalizing SELU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-12;

/// Row-wise affine map `input · weights + bias`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in) = input.dims2();
    let (w_in, d_out) = weights.dims2();
    if weights.shape().len() != 2 || w_in != d_in {
        return Err(Error::invalid(format!(
            "linear: input {:?} incompatible with weights {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    if bias.len() != d_out {
        return Err(Error::invalid(format!("linear: bias length {} != {d_out}", bias.len())));
    }
    let mut out = matmul(input.values(), weights.values(), n, d_in, d_out);
    for row in out.chunks_mut(d_out) {
        for (o, b) in row.iter_mut().zip(bias.values()) {
            *o += b;
        }
    }
    Tensor::matrix(n, d_out, out)?.ensure_finite("linear")
}

#[inline]
pub fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub(crate) fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn selu(x: &Tensor) -> Tensor {
    x.map(selu_scalar)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Elementwise maximum over the rows of an m×d matrix.
pub fn rowwise_max(inputs: &Tensor) -> Result<Tensor> {
    let (m, d) = inputs.dims2();
    if m == 0 || inputs.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let mut out = inputs.row(0).to_vec();
    for r in 1..m {
        for (o, &v) in out.iter_mut().zip(inputs.row(r)) {
            if v > *o {
                *o = v;
            }
        }
    }
    debug_assert_eq!(out.len(), d);
    Ok(Tensor::vector(out))
}

/// Binary cross entropy of a probability against a {0,1} label.
///
/// The probability is clamped to `[BCE_EPS, 1 - BCE_EPS]`. Training never
/// goes through this function; it uses [`bce_with_logits`] on raw scores.
pub fn bce_loss(confidence: f64, label: f64) -> f64 {
    let p = confidence.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let neg_ln_p = -p.ln();
    let neg_ln_q = -(-p).ln_1p();
    label * neg_ln_p + (1.0 - label) * neg_ln_q
}

/// Binary cross entropy on a logit `z`: `softplus(z) - y·z`.
pub fn bce_with_logits(logit: f64, label: f64) -> f64 {
    softplus(logit) - label * logit
}
