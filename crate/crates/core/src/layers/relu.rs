use crate::kernels;
use crate::moments::{GaussianScalar, MomentTensor, MpDiagnostics};
use crate::tensor::Tensor;

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|x| x.max(0.0)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Moments of `max(X, 0)` for `X ~ N(mean, variance)`.
///
/// Below [`VARIANCE_EPS`](crate::moments::VARIANCE_EPS) the input is treated as a point mass.
#[inline]
pub fn relu_moments(x: GaussianScalar, diag: &mut MpDiagnostics) -> GaussianScalar {
    let (mean, variance) = kernels::relu_lane(x.mean, x.variance);
    GaussianScalar { mean, variance: diag.clamp(variance) }
}

pub fn relu_mp(input: &MomentTensor) -> MomentTensor {
    relu_mp_with(input, &mut MpDiagnostics::default())
}

pub fn relu_mp_with(input: &MomentTensor, diag: &mut MpDiagnostics) -> MomentTensor {
    let mut out = input.clone();
    relu_mp_in_place(&mut out, diag);
    out
}

pub(crate) fn relu_mp_in_place(m: &mut MomentTensor, diag: &mut MpDiagnostics) {
    let (e, v) = m.parts_mut();
    if v.iter().all(|x| *x == 0.0) {
        e.iter_mut().for_each(|x| *x = x.max(0.0));
        return;
    }
    diag.add_clamped(kernels::relu_slice(e, v));
}

/// Gradient of ReLU given its forward input.
pub fn relu_backward(input: &[f64], grad_output: &[f64]) -> Vec<f64> {
    input.iter().zip(grad_output).map(|(x, g)| if *x > 0.0 { *g } else { 0.0 }).collect()
}
