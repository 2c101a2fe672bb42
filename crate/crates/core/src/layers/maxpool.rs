//! Non-overlapping N×N max pooling.
//!
//! The moment version folds the exact two-Gaussian maximum over each window
//! in row-major order, treating every intermediate maximum as Gaussian. That
//! step makes windows with more than two entries approximate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::moments::{GaussianScalar, MomentTensor, MpDiagnostics};
use crate::tensor::{split_batch, with_features, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2DSpec {
    size: usize,
}

impl MaxPool2DSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!("pooling window must be at least 2, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Output `[C, H/N, W/N]`; trailing rows and columns that do not fill a
    /// window are dropped.
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<[usize; 3]> {
        if in_shape.len() != 3 {
            return Err(shape_err(format!("max pooling expects [C, H, W], got {:?}", in_shape)));
        }
        let (oh, ow) = (in_shape[1] / self.size, in_shape[2] / self.size);
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!(
                "{}x{} pooling on {}x{} input",
                self.size, self.size, in_shape[1], in_shape[2]
            )));
        }
        Ok([in_shape[0], oh, ow])
    }
}

struct PoolLayout {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    size: usize,
}

impl PoolLayout {
    fn new(spec: &MaxPool2DSpec, shape: &[usize]) -> Result<(Self, Vec<usize>)> {
        let (n, features) = split_batch(shape, 3)?;
        let [c, oh, ow] = spec.output_shape(features)?;
        let layout = PoolLayout { n, c, h: features[1], w: features[2], oh, ow, size: spec.size };
        Ok((layout, with_features(shape, 3, &[c, oh, ow])))
    }

    /// Calls `f(output_index, window)` with input indices in row-major window order.
    fn for_each_window(&self, mut f: impl FnMut(usize, &[usize])) {
        let mut window = Vec::with_capacity(self.size * self.size);
        let mut out = 0;
        for plane in 0..self.n * self.c {
            let base = plane * self.h * self.w;
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    window.clear();
                    for dy in 0..self.size {
                        let row = base + (oy * self.size + dy) * self.w + ox * self.size;
                        window.extend(row..row + self.size);
                    }
                    f(out, &window);
                    out += 1;
                }
            }
        }
    }
}

pub fn maxpool2d_forward(input: &Tensor, spec: &MaxPool2DSpec) -> Result<Tensor> {
    let (layout, shape) = PoolLayout::new(spec, input.shape())?;
    let out = window_max(&layout, input.data(), shape.iter().product());
    Ok(Tensor::from_parts(shape, out))
}

fn window_max(layout: &PoolLayout, x: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    layout.for_each_window(|o, window| {
        out[o] = window[1..].iter().fold(x[window[0]], |m, &i| if x[i] > m { x[i] } else { m });
    });
    out
}

/// Forward pass that also records, per output, the input index of the
/// first maximal entry (used for backpropagation).
pub fn maxpool2d_forward_with_argmax(input: &Tensor, spec: &MaxPool2DSpec) -> Result<(Tensor, Vec<usize>)> {
    let (layout, shape) = PoolLayout::new(spec, input.shape())?;
    let x = input.data();
    let len = shape.iter().product();
    let mut out = vec![0.0; len];
    let mut arg = vec![0; len];
    layout.for_each_window(|o, window| {
        let mut best = window[0];
        for &i in &window[1..] {
            if x[i] > x[best] {
                best = i;
            }
        }
        out[o] = x[best];
        arg[o] = best;
    });
    Ok((Tensor::from_parts(shape, out), arg))
}

/// Exact moments of `max(A, B)` for independent Gaussians `A` and `B`.
///
/// When the pooled standard deviation falls below
/// [`VARIANCE_EPS`](crate::moments::VARIANCE_EPS) the larger
/// mean wins outright and keeps its own variance (ties go to `a`).
#[inline]
pub fn maxpool_pair(a: GaussianScalar, b: GaussianScalar, diag: &mut MpDiagnostics) -> GaussianScalar {
    let (mean, variance) = kernels::pair_lane(a.mean, a.variance, b.mean, b.variance);
    GaussianScalar { mean, variance: diag.clamp(variance) }
}

pub fn maxpool2d_mp(input: &MomentTensor, spec: &MaxPool2DSpec) -> Result<MomentTensor> {
    maxpool2d_mp_with(input, spec, &mut MpDiagnostics::default())
}

pub fn maxpool2d_mp_with(input: &MomentTensor, spec: &MaxPool2DSpec, diag: &mut MpDiagnostics) -> Result<MomentTensor> {
    let (layout, shape) = PoolLayout::new(spec, input.shape())?;
    let len = shape.iter().product();
    let mut e = vec![0.0; len];
    let mut v = vec![0.0; len];
    if input.variance().iter().all(|v| *v == 0.0) {
        let e = window_max(&layout, input.expectation(), len);
        return Ok(MomentTensor::from_parts(shape, e, v));
    }
    // Left fold over each window in row-major order, advanced one window
    // position at a time across all outputs so that consecutive pair
    // evaluations are independent.
    let mut bases = Vec::with_capacity(len);
    layout.for_each_window(|_, window| bases.push(window[0]));
    let (ie, iv) = (input.expectation(), input.variance());
    for (o, &b) in bases.iter().enumerate() {
        e[o] = ie[b];
        v[o] = iv[b];
    }
    let (mut ne, mut nv) = (vec![0.0; len], vec![0.0; len]);
    for dy in 0..layout.size {
        for dx in 0..layout.size {
            if dy == 0 && dx == 0 {
                continue;
            }
            let off = dy * layout.w + dx;
            for (o, &b) in bases.iter().enumerate() {
                ne[o] = ie[b + off];
                nv[o] = iv[b + off];
            }
            diag.add_clamped(kernels::pair_slice(&mut e, &mut v, &ne, &nv));
        }
    }
    Ok(MomentTensor::from_parts(shape, e, v))
}

/// Routes each output gradient to the recorded argmax input.
pub fn maxpool2d_backward(argmax: &[usize], input_len: usize, grad_output: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&i, g) in argmax.iter().zip(grad_output) {
        gx[i] += g;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn g(m: f64, v: f64) -> GaussianScalar {
        GaussianScalar::new(m, v).unwrap()
    }

    fn pair(a: GaussianScalar, b: GaussianScalar) -> GaussianScalar {
        maxpool_pair(a, b, &mut MpDiagnostics::default())
    }

    #[test]
    fn two_standard_normals() {
        let out = pair(g(0.0, 1.0), g(0.0, 1.0));
        assert!((out.mean - 1.0 / PI.sqrt()).abs() < 1e-14);
        assert!((out.variance - (1.0 - 1.0 / PI)).abs() < 1e-14);
        assert!((out.mean - 0.564_189_6).abs() < 1e-7);
        assert!((out.variance - 0.681_690_1).abs() < 1e-7);
    }

    #[test]
    fn dominant_branch() {
        let out = pair(g(10.0, 0.01), g(0.0, 0.01));
        assert!((out.mean - 10.0).abs() < 1e-9);
        assert!((out.variance - 0.01).abs() < 1e-9);
    }

    #[test]
    fn equal_constants() {
        let out = pair(g(1.5, 0.0), g(1.5, 0.0));
        assert_eq!(out, g(1.5, 0.0));
        // Degenerate limit keeps the variance of the winning input.
        let out = pair(g(2.0, 1e-30), g(1.0, 0.0));
        assert_eq!(out, g(2.0, 1e-30));
    }

    #[test]
    fn window_of_constants() {
        let m = MomentTensor::new(vec![1, 2, 2], vec![3.0; 4], vec![0.0; 4]).unwrap();
        let out = maxpool2d_mp(&m, &MaxPool2DSpec::new(2).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.expectation(), &[3.0]);
        assert_eq!(out.variance(), &[0.0]);
    }

    #[test]
    fn window_with_dominant_entry() {
        let m = MomentTensor::new(vec![1, 2, 2], vec![0.0, 10.0, 0.0, 0.0], vec![0.01; 4]).unwrap();
        let out = maxpool2d_mp(&m, &MaxPool2DSpec::new(2).unwrap()).unwrap();
        assert!((out.expectation()[0] - 10.0).abs() < 1e-3);
        assert!((out.variance()[0] - 0.01).abs() < 1e-3);
    }

    #[test]
    fn forward_picks_window_maxima_and_crops() {
        #[rustfmt::skip]
        let x = Tensor::new(vec![1, 3, 5], vec![
            1.0, 5.0, 2.0, 0.0, 9.0,
            3.0, 4.0, 8.0, 7.0, 9.0,
            9.0, 9.0, 9.0, 9.0, 9.0,
        ]).unwrap();
        let (out, arg) = maxpool2d_forward_with_argmax(&x, &MaxPool2DSpec::new(2).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2]);
        assert_eq!(out.data(), &[5.0, 8.0]);
        assert_eq!(arg, vec![1, 7]);
    }

    #[test]
    fn zero_variance_matches_deterministic() {
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        let spec = MaxPool2DSpec::new(2).unwrap();
        let det = maxpool2d_forward(&x, &spec).unwrap();
        let mp = maxpool2d_mp(&MomentTensor::deterministic(&x), &spec).unwrap();
        assert_eq!(mp.expectation(), det.data());
        assert!(mp.variance().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn window_size_must_be_at_least_two() {
        assert!(MaxPool2DSpec::new(1).is_err());
        let spec = MaxPool2DSpec::new(4).unwrap();
        assert!(spec.output_shape(&[1, 3, 8]).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pair_is_symmetric(
            e1 in -10.0f64..10.0, v1 in 0.0f64..5.0,
            e2 in -10.0f64..10.0, v2 in 0.0f64..5.0,
        ) {
            let ab = pair(g(e1, v1), g(e2, v2));
            let ba = pair(g(e2, v2), g(e1, v1));
            prop_assert!((ab.mean - ba.mean).abs() <= 1e-12);
            prop_assert!((ab.variance - ba.variance).abs() <= 1e-12);
            prop_assert!(ab.variance >= 0.0);
            prop_assert!(ab.mean >= e1.max(e2) - 1e-12);
        }
    }
}
