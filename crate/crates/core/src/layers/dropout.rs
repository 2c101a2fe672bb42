//! Dropout with the non-inverted convention.
//!
//! Sampled masks keep a node with probability `1 - rate` and never rescale.
//! The deterministic forward instead scales every activation by `1 - rate`,
//! which is the expectation of the sampled forward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{product_variance, GaussianScalar, MomentTensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }

    /// Probability that a node is dropped.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Probability that a node is kept.
    pub fn keep(&self) -> f64 {
        1.0 - self.rate
    }
}

/// Test-time forward of standard dropout: activations scaled by `1 - rate`.
pub fn dropout_forward(input: &Tensor, spec: &DropoutSpec) -> Tensor {
    let keep = spec.keep();
    let data = input.data().iter().map(|x| x * keep).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// One stochastic forward: every node multiplied by an independent
/// Bernoulli(`1 - rate`) draw.
pub fn dropout_sample<R: Rng + ?Sized>(input: &Tensor, spec: &DropoutSpec, rng: &mut R) -> Tensor {
    let mut out = input.clone();
    let mut mask = vec![0.0; input.len()];
    sample_mask(spec.keep(), rng, &mut mask);
    for (x, m) in out.data_mut().iter_mut().zip(&mask) {
        *x *= m;
    }
    out
}

/// Fills `mask` with independent 0/1 draws, one with probability `keep`.
#[inline]
pub(crate) fn sample_mask<R: Rng + ?Sized>(keep: f64, rng: &mut R, mask: &mut [f64]) {
    if keep >= 1.0 {
        mask.fill(1.0);
        return;
    }
    for m in mask.iter_mut() {
        *m = if rng.random::<f64>() < keep { 1.0 } else { 0.0 };
    }
}

/// Moments after dropout. Exact for any input distribution, since the mask
/// is independent of the signal.
pub fn dropout_mp(input: &MomentTensor, spec: &DropoutSpec) -> MomentTensor {
    let mut out = input.clone();
    dropout_mp_in_place(&mut out, spec);
    out
}

pub(crate) fn dropout_mp_in_place(m: &mut MomentTensor, spec: &DropoutSpec) {
    let keep = spec.keep();
    let mask = GaussianScalar::bernoulli(keep);
    let (e, v) = m.parts_mut();
    for (ei, vi) in e.iter_mut().zip(v.iter_mut()) {
        *vi = product_variance(GaussianScalar { mean: *ei, variance: *vi }, mask);
        *ei *= keep;
    }
}

/// Gradient of a masked forward with respect to its input.
pub fn dropout_backward(mask: &[f64], grad_output: &[f64]) -> Vec<f64> {
    grad_output.iter().zip(mask).map(|(g, m)| g * m).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mt(e: f64, v: f64) -> MomentTensor {
        MomentTensor::new(vec![1], vec![e], vec![v]).unwrap()
    }

    #[test]
    fn rate_must_be_below_one() {
        assert!(DropoutSpec::new(1.0).is_err());
        assert!(DropoutSpec::new(-0.1).is_err());
        assert!(DropoutSpec::new(0.0).is_ok());
    }

    #[test]
    fn two_outcome_enumeration() {
        // X = 1 constant, mask in {0, 1} with probability 1/2 each.
        let out = dropout_mp(&mt(1.0, 0.0), &DropoutSpec::new(0.5).unwrap());
        let outcomes = [0.0f64, 1.0];
        let mean = outcomes.iter().sum::<f64>() / 2.0;
        let var = outcomes.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / 2.0;
        assert_eq!(out.expectation()[0], mean);
        assert_eq!(out.variance()[0], var);
    }

    #[test]
    fn closed_form_example() {
        let out = dropout_mp(&mt(2.0, 1.0), &DropoutSpec::new(0.3).unwrap());
        assert!((out.expectation()[0] - 1.4).abs() < 1e-12);
        assert!((out.variance()[0] - 1.54).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_is_identity() {
        let spec = DropoutSpec::new(0.0).unwrap();
        let m = MomentTensor::new(vec![3], vec![1.0, -2.0, 0.5], vec![0.1, 0.0, 3.0]).unwrap();
        assert_eq!(dropout_mp(&m, &spec), m);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(dropout_sample(&x, &spec, &mut rng), x);
        assert_eq!(dropout_forward(&x, &spec), x);
    }

    #[test]
    fn sampling_is_reproducible_under_seed() {
        let spec = DropoutSpec::new(0.5).unwrap();
        let x = Tensor::vector(vec![1.0; 64]);
        let a = dropout_sample(&x, &spec, &mut ChaCha8Rng::seed_from_u64(11));
        let b = dropout_sample(&x, &spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn sampled_mean_matches_keep_probability() {
        let spec = DropoutSpec::new(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let mut mask = vec![0.0; n];
        sample_mask(spec.keep(), &mut rng, &mut mask);
        let mean = mask.iter().sum::<f64>() / n as f64;
        let se = (0.7f64 * 0.3 / n as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * se, "mean {mean}");
    }
}
