use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, gemm_nt, gemm_tn};
use crate::moments::MomentTensor;
use crate::tensor::{split_batch, with_features, Tensor};

/// Fully connected layer `y_i = Σ_j w_ji x_j + b_i`.
///
/// Weights are stored row-major as `in_dim × out_dim`. Every parameter is
/// rounded to the nearest `f32` on construction so that the on-disk `f32`
/// representation is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    weights_sq: Vec<f64>,
}

pub(crate) fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite entries")))
    }
}

impl DenseSpec {
    pub fn new(in_dim: usize, out_dim: usize, mut weights: Vec<f64>, mut bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(shape_err("dense layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(shape_err(format!(
                "dense {in_dim}->{out_dim} needs {} weights and {} biases, got {} and {}",
                in_dim * out_dim,
                out_dim,
                weights.len(),
                bias.len()
            )));
        }
        check_finite("dense weights", &weights)?;
        check_finite("dense bias", &bias)?;
        round_f32(&mut weights);
        round_f32(&mut bias);
        let weights_sq = weights.iter().map(|w| w * w).collect();
        Ok(Self { in_dim, out_dim, weights, bias, weights_sq })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Row-major `in_dim × out_dim`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn batch_of(&self, shape: &[usize]) -> Result<usize> {
        let (n, features) = split_batch(shape, 1)?;
        if features[0] != self.in_dim {
            return Err(shape_err(format!(
                "dense layer expects {} inputs, got shape {:?}",
                self.in_dim, shape
            )));
        }
        Ok(n)
    }
}

/// `out = x · w + b` for a batch of `n` rows.
pub(crate) fn affine(x: &[f64], n: usize, in_dim: usize, out_dim: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(n, in_dim, out_dim, x, w, 1.0, &mut out);
    out
}

fn linear(x: &[f64], n: usize, in_dim: usize, out_dim: usize, w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    gemm(n, in_dim, out_dim, x, w, 0.0, &mut out);
    out
}

/// Deterministic affine forward. The last axis of `input` is the feature axis.
pub fn dense_forward(input: &Tensor, spec: &DenseSpec) -> Result<Tensor> {
    let n = spec.batch_of(input.shape())?;
    let out = affine(input.data(), n, spec.in_dim, spec.out_dim, &spec.weights, &spec.bias);
    Ok(Tensor::from_parts(with_features(input.shape(), 1, &[spec.out_dim]), out))
}

/// Moment propagation through the affine map: expectations follow the affine
/// map itself, variances the squared weights without bias.
pub fn dense_mp(input: &MomentTensor, spec: &DenseSpec) -> Result<MomentTensor> {
    let n = spec.batch_of(input.shape())?;
    let e = affine(input.expectation(), n, spec.in_dim, spec.out_dim, &spec.weights, &spec.bias);
    let v = if input.variance().iter().all(|v| *v == 0.0) {
        vec![0.0; e.len()]
    } else {
        linear(input.variance(), n, spec.in_dim, spec.out_dim, &spec.weights_sq)
    };
    Ok(MomentTensor::from_parts(with_features(input.shape(), 1, &[spec.out_dim]), e, v))
}

/// Parameter and input gradients of a dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of `out = x · w + b` for a batch of `n` rows.
pub fn dense_backward(
    x: &[f64],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    w: &[f64],
    grad_out: &[f64],
) -> DenseGrads {
    let mut gw = vec![0.0; in_dim * out_dim];
    gemm_tn(in_dim, n, out_dim, x, grad_out, 0.0, &mut gw);
    let mut gb = vec![0.0; out_dim];
    for row in grad_out.chunks_exact(out_dim) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut gx = vec![0.0; n * in_dim];
    gemm_nt(n, out_dim, in_dim, grad_out, w, 0.0, &mut gx);
    DenseGrads { input: gx, weights: gw, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_2x2() -> DenseSpec {
        DenseSpec::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn identity_passes_moments_through() {
        let m = MomentTensor::new(vec![2], vec![0.5, -1.5], vec![2.0, 0.25]).unwrap();
        let out = dense_mp(&m, &spec_2x2()).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn zero_variance_is_affine() {
        let spec = DenseSpec::new(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5], vec![0.1, -0.2]).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, -3.0]);
        let det = dense_forward(&x, &spec).unwrap();
        let mp = dense_mp(&MomentTensor::deterministic(&x), &spec).unwrap();
        assert_eq!(mp.expectation(), det.data());
        assert!(mp.variance().iter().all(|v| *v == 0.0));
        // 0.5·1 + 2·2 + (-0.75)·(-3) + 0.1
        assert!((det.data()[0] - 6.85).abs() < 1e-6);
    }

    #[test]
    fn bias_does_not_enter_variance() {
        let spec = DenseSpec::new(1, 1, vec![3.0], vec![100.0]).unwrap();
        let m = MomentTensor::new(vec![1], vec![1.0], vec![2.0]).unwrap();
        let out = dense_mp(&m, &spec).unwrap();
        assert_eq!(out.expectation(), &[103.0]);
        assert_eq!(out.variance(), &[18.0]);
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let spec = DenseSpec::new(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5], vec![0.1, -0.2]).unwrap();
        let m = MomentTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5], vec![0.1, 0.2, 0.3, 1.0, 0.0, 2.0])
            .unwrap();
        let batched = dense_mp(&m, &spec).unwrap();
        assert_eq!(batched.shape(), &[2, 2]);
        let second = MomentTensor::new(vec![3], vec![-1.0, 0.0, 0.5], vec![1.0, 0.0, 2.0]).unwrap();
        let single = dense_mp(&second, &spec).unwrap();
        assert_eq!(&batched.expectation()[2..], single.expectation());
        assert_eq!(&batched.variance()[2..], single.variance());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = MomentTensor::new(vec![3], vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(matches!(dense_mp(&m, &spec_2x2()), Err(Error::Shape(_))));
        assert!(DenseSpec::new(2, 2, vec![1.0; 3], vec![0.0; 2]).is_err());
        assert!(DenseSpec::new(1, 1, vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn weights_round_to_f32() {
        let spec = DenseSpec::new(1, 1, vec![0.1], vec![0.2]).unwrap();
        assert_eq!(spec.weights()[0], 0.1f32 as f64);
        assert_eq!(spec.bias()[0], 0.2f32 as f64);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn scaling_input_scales_moments(
            w in proptest::collection::vec(-2.0f64..2.0, 6),
            e in proptest::collection::vec(-3.0f64..3.0, 3),
            v in proptest::collection::vec(0.0f64..2.0, 3),
            a in -4.0f64..4.0,
        ) {
            let spec = DenseSpec::new(3, 2, w, vec![0.0; 2]).unwrap();
            let base = dense_mp(&MomentTensor::new(vec![3], e.clone(), v.clone()).unwrap(), &spec).unwrap();
            let scaled_in = MomentTensor::new(
                vec![3],
                e.iter().map(|x| a * x).collect(),
                v.iter().map(|x| a * a * x).collect(),
            ).unwrap();
            let scaled = dense_mp(&scaled_in, &spec).unwrap();
            for i in 0..2 {
                prop_assert!((scaled.expectation()[i] - a * base.expectation()[i]).abs() <= 1e-10 * (1.0 + base.expectation()[i].abs() * a.abs()));
                prop_assert!((scaled.variance()[i] - a * a * base.variance()[i]).abs() <= 1e-10 * (1.0 + base.variance()[i] * a * a));
            }
        }
    }
}
