//! Moment containers and the Gaussian special functions shared by every
//! moment-propagation layer.
//!
//! Only the diagonal of the activation covariance is tracked: every node is
//! summarised by its expectation and variance, and nodes are treated as
//! independent.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Below this variance (or pooled standard deviation) the moment formulas
/// switch to their exact deterministic limits.
pub const VARIANCE_EPS: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Density of the standard normal distribution.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, evaluated through the complementary error function so
/// that both tails keep full relative precision.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Returns `(Φ(−|x|), φ(x))` with a single exponential.
///
/// Used by the ReLU and max-pool kernels, which always need both. Agrees with
/// the erfc-based [`std_normal_cdf`] to about 1e-13 relative wherever the
/// tail is a normal float.
#[inline]
pub fn std_normal_tail_pdf(x: f64) -> (f64, f64) {
    crate::kernels::tail_pdf(x)
}

/// Inverse of [`std_normal_cdf`] for `p` in (0, 1).
///
/// Acklam's rational approximation followed by one Halley step against the
/// erfc-based CDF, which brings the result to near machine precision.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// First two moments of a scalar random variable, most often read as the
/// Gaussian `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianScalar {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianScalar {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() || variance < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid moments (mean {mean}, variance {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    /// A point mass at `value`.
    pub fn constant(value: f64) -> Self {
        Self { mean: value, variance: 0.0 }
    }

    /// Moments of a Bernoulli variable that is one with probability `keep`.
    pub fn bernoulli(keep: f64) -> Self {
        Self { mean: keep, variance: keep * (1.0 - keep) }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Variance of the product of two independent random variables.
///
/// Only the first two moments enter, so the arguments need not be Gaussian.
#[inline]
pub fn product_variance(x: GaussianScalar, y: GaussianScalar) -> f64 {
    x.variance * y.variance + x.variance * y.mean * y.mean + x.mean * x.mean * y.variance
}

/// Expectation and per-node variance of a tensor-valued signal.
///
/// Both arrays are row-major with the same shape, and every variance entry is
/// non-negative. Values are immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    shape: Vec<usize>,
    expectation: Vec<f64>,
    variance: Vec<f64>,
}

impl MomentTensor {
    /// Builds a moment tensor, rejecting negative or non-finite variances.
    pub fn new(shape: Vec<usize>, expectation: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if expectation.len() != n || variance.len() != n {
            return Err(shape_err(format!(
                "shape {:?} needs {} entries, got expectation {} / variance {}",
                shape,
                n,
                expectation.len(),
                variance.len()
            )));
        }
        if let Some(i) = variance.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "variance entry {i} is {} (must be finite and >= 0)",
                variance[i]
            )));
        }
        Ok(Self { shape, expectation, variance })
    }

    /// Lifts a point value to moments with zero variance.
    pub fn deterministic(values: &Tensor) -> Self {
        Self {
            shape: values.shape().to_vec(),
            expectation: values.data().to_vec(),
            variance: vec![0.0; values.len()],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, expectation: Vec<f64>, variance: Vec<f64>) -> Self {
        debug_assert_eq!(expectation.len(), variance.len());
        debug_assert!(variance.iter().all(|v| *v >= 0.0));
        Self { shape, expectation, variance }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn expectation(&self) -> &[f64] {
        &self.expectation
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn len(&self) -> usize {
        self.expectation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expectation.is_empty()
    }

    pub fn get(&self, i: usize) -> GaussianScalar {
        GaussianScalar { mean: self.expectation[i], variance: self.variance[i] }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.expectation, &mut self.variance)
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        (self.shape, self.expectation, self.variance)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        Ok(Self { shape, ..self })
    }

    pub fn expectation_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.expectation.clone())
    }

    pub fn variance_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.variance.clone())
    }
}

/// Counters collected while propagating moments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MpDiagnostics {
    /// Variance entries that came out negative from rounding and were set to zero.
    pub clamped_variances: usize,
}

impl MpDiagnostics {
    #[inline]
    pub(crate) fn clamp(&mut self, v: f64) -> f64 {
        if v < 0.0 {
            self.clamped_variances += 1;
            0.0
        } else {
            v
        }
    }

    #[inline]
    pub(crate) fn add_clamped(&mut self, count: usize) {
        self.clamped_variances += count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_reference_values() {
        assert!((std_normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        // 1/sqrt(2π)·e^{-1/2}
        assert!((std_normal_pdf(1.0) - 0.241_970_724_519_143_37).abs() < 1e-15);
        assert_eq!(std_normal_pdf(1.0), std_normal_pdf(-1.0));
        assert!(std_normal_pdf(10.0) < 1e-21);
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        // Φ(1.959964) from a 30-digit evaluation: 0.97500000...
        assert!((std_normal_cdf(1.959_964) - 0.975).abs() < 1e-7);
        // Φ(1) = 0.841344746068542948585232545632
        assert!((std_normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        // Φ(-5) = 2.86651571879193911673752333e-7
        assert!((std_normal_cdf(-5.0) - 2.866_515_718_791_939e-7).abs() < 1e-20);
        assert!(std_normal_cdf(-8.0) < 1e-14);
        assert!(std_normal_cdf(-8.0) > 0.0);
    }

    #[test]
    fn cdf_symmetry_and_monotonicity() {
        let mut prev = 0.0;
        for i in -1600..=1600 {
            let x = i as f64 * 0.005;
            let c = std_normal_cdf(x);
            assert!(c >= prev);
            prev = c;
            assert!((c + std_normal_cdf(-x) - 1.0).abs() <= 1e-12, "x = {x}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        assert!((std_normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        for &p in &[1e-10, 0.001, 0.02, 0.3, 0.5, 0.8, 0.99, 1.0 - 1e-9] {
            let x = std_normal_quantile(p);
            assert!(((std_normal_cdf(x) - p) / p).abs() < 1e-10, "p = {p}");
        }
    }

    #[test]
    fn product_variance_examples() {
        let half = GaussianScalar::bernoulli(0.5);
        assert_eq!(product_variance(GaussianScalar::constant(1.0), half), 0.25);
        assert_eq!(product_variance(GaussianScalar::constant(0.0), half), 0.0);
        let x = GaussianScalar::new(2.0, 1.0).unwrap();
        assert_eq!(product_variance(x, GaussianScalar::constant(1.0)), 1.0);
    }

    #[test]
    fn moment_tensor_rejects_bad_variance() {
        assert!(MomentTensor::new(vec![2], vec![0.0, 1.0], vec![0.0, -1e-30]).is_err());
        assert!(MomentTensor::new(vec![2], vec![0.0, 1.0], vec![0.0, f64::NAN]).is_err());
        assert!(MomentTensor::new(vec![3], vec![0.0, 1.0], vec![0.0, 1.0]).is_err());
        assert!(MomentTensor::new(vec![2], vec![0.0, 1.0], vec![0.0, 1.0]).is_ok());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn product_variance_symmetric_nonnegative(
            ex in -50.0f64..50.0, vx in 0.0f64..20.0,
            ey in -50.0f64..50.0, vy in 0.0f64..20.0,
        ) {
            let x = GaussianScalar::new(ex, vx).unwrap();
            let y = GaussianScalar::new(ey, vy).unwrap();
            let a = product_variance(x, y);
            let b = product_variance(y, x);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
