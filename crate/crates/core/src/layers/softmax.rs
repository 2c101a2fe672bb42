//! Softmax and its expectation under independent Gaussian logits.
//!
//! With `z ~ N(E, diag(V))`, the expected probability of class `i` is
//! approximated by
//!
//! ```text
//! E[π_i] ≈ 1 / (2 - K + Σ_{k≠i} 1 / E[σ(z_i - z_k)])
//! ```
//!
//! where each pairwise difference is Gaussian and its expected sigmoid uses
//! the probit approximation `E[σ(x)] ≈ Φ(m / sqrt(s² + 8/π))`. The K results
//! are renormalised to sum to one. No variance is produced.

use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::moments::{std_normal_cdf, MomentTensor, VARIANCE_EPS};
use crate::tensor::{split_batch, Tensor};

const PROBIT_VARIANCE: f64 = 8.0 / PI;

/// Numerically stable softmax over the last axis.
pub fn softmax_forward(input: &Tensor) -> Result<Tensor> {
    let (_, features) = split_batch(input.shape(), 1)?;
    let k = features[0];
    if k == 0 {
        return Err(shape_err("softmax over an empty axis"));
    }
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Expected sigmoid of a Gaussian with the given mean and variance.
///
/// A point mass (variance below [`VARIANCE_EPS`]) takes the exact logistic
/// value; otherwise the probit approximation is used.
#[inline]
pub fn expected_sigmoid(mean: f64, variance: f64) -> f64 {
    if variance < VARIANCE_EPS {
        logistic(mean)
    } else {
        std_normal_cdf(mean / (variance + PROBIT_VARIANCE).sqrt())
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_mp_row(e: &[f64], v: &[f64], out: &mut [f64]) {
    let k = e.len();
    for i in 0..k {
        let mut denom = 2.0 - k as f64;
        for j in (0..k).filter(|&j| j != i) {
            denom += 1.0 / expected_sigmoid(e[i] - e[j], v[i] + v[j]);
        }
        out[i] = 1.0 / denom;
    }
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
}

/// Expected class probabilities for Gaussian logits along the last axis.
pub fn softmax_mp(input: &MomentTensor) -> Result<Tensor> {
    let (_, features) = split_batch(input.shape(), 1)?;
    let k = features[0];
    if k < 2 {
        return Err(shape_err(format!("softmax expectation needs at least 2 classes, got {k}")));
    }
    let mut out = vec![0.0; input.len()];
    for ((e, v), o) in input
        .expectation()
        .chunks_exact(k)
        .zip(input.variance().chunks_exact(k))
        .zip(out.chunks_exact_mut(k))
    {
        softmax_mp_row(e, v, o);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Gradient of the mean categorical negative log-likelihood with respect to
/// the logits, given softmax probabilities: `(π - onehot) / n`.
pub fn softmax_nll_backward(probs: &[f64], labels: &[usize], k: usize) -> Vec<f64> {
    let n = labels.len();
    let mut g = probs.to_vec();
    for (row, &y) in g.chunks_exact_mut(k).zip(labels) {
        row[y] -= 1.0;
        for x in row.iter_mut() {
            *x /= n as f64;
        }
    }
    g
}
