//! Plain (non-recording) numeric kernels. The tape ops call these for their
//! forward values so both paths produce identical bits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    if let Some(row) = m.first_non_finite_row() {
        return Err(Error::NonFinite {
            op: "softmax_rows",
            row,
        });
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(v)` over the given values; `-inf` for an empty set.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn identity(c: usize) -> Self {
        Self {
            gain: vec![1.0; c],
            bias: vec![0.0; c],
            epsilon: DEFAULT_LN_EPS,
        }
    }
}

/// Mean and `1/sqrt(var + eps)` of one row (population variance).
#[inline]
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm(x: &[f64], p: &LayerNormParams) -> Result<Vec<f64>> {
    if x.len() < 2 || p.gain.len() != x.len() || p.bias.len() != x.len() {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {}, gain {}, bias {}",
                x.len(),
                p.gain.len(),
                p.bias.len()
            ),
        ));
    }
    if p.epsilon <= 0.0 {
        return Err(Error::InvalidParam("layer_norm epsilon must be > 0".into()));
    }
    let (mean, inv) = row_moments(x, p.epsilon);
    Ok(x.iter()
        .zip(p.gain.iter().zip(&p.bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect())
}

pub(crate) fn layer_norm_rows(
    x: &DenseMatrix,
    gain: &DenseMatrix,
    bias: &DenseMatrix,
    eps: f64,
) -> Result<DenseMatrix> {
    let c = x.cols();
    if gain.shape() != (1, c) || bias.shape() != (1, c) {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?}, gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, inv) = row_moments(x.row(r), eps);
        for (k, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data()[k] + bias.data()[k];
        }
    }
    Ok(out)
}

pub(crate) fn add_row_bias(x: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.shape() != (1, x.cols()) {
        return Err(Error::shape(
            "bias",
            format!("bias {:?} for input {:?}", b.shape(), x.shape()),
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(out)
}

/// `x·w + b` with `b` broadcast over rows.
pub fn linear(x: &DenseMatrix, w: &DenseMatrix, b: &[f64]) -> Result<DenseMatrix> {
    let xw = x.matmul(w)?;
    add_row_bias(&xw, &DenseMatrix::row_vector(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParam(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Inverted-dropout keep mask: 0 for dropped, `1/(1-rate)` for kept.
pub(crate) fn dropout_mask(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> DenseMatrix {
    let keep_scale = 1.0 / (1.0 - rate);
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Inverted dropout. Eval mode and rate 0 return the input unchanged.
pub fn dropout(
    x: &DenseMatrix,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<DenseMatrix> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng);
    x.hadamard(&mask)
}
