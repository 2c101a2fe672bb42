//! 2-D convolution (cross-correlation, as in common deep learning frameworks)
//! lowered to a matrix product through im2col.

use serde::{Deserialize, Serialize};

use super::dense::{check_finite, round_f32};
use crate::error::{shape_err, Result};
use crate::linalg::{gemm, gemm_nt, gemm_tn};
use crate::moments::MomentTensor;
use crate::tensor::{split_batch, with_features, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that the output has `ceil(input / stride)` pixels.
    #[default]
    Same,
    /// No padding.
    Valid,
}

/// Convolution parameters. The kernel is laid out
/// `out_channels × in_channels × kernel_h × kernel_w`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2DSpec {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
    padding: Padding,
    stride: usize,
    kernel_sq: Vec<f64>,
}

/// Resolved sizes of one convolution applied to a concrete input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }
}

impl Conv2DSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        mut kernel: Vec<f64>,
        mut bias: Vec<f64>,
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(shape_err("convolution dimensions must be positive"));
        }
        if stride == 0 {
            return Err(shape_err("convolution stride must be at least 1"));
        }
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if kernel.len() != expected || bias.len() != out_channels {
            return Err(shape_err(format!(
                "kernel needs {expected} weights and {out_channels} biases, got {} and {}",
                kernel.len(),
                bias.len()
            )));
        }
        check_finite("convolution kernel", &kernel)?;
        check_finite("convolution bias", &bias)?;
        round_f32(&mut kernel);
        round_f32(&mut bias);
        let kernel_sq = kernel.iter().map(|w| w * w).collect();
        Ok(Self { out_channels, in_channels, kernel_h, kernel_w, kernel, bias, padding, stride, kernel_sq })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Geometry for an input of `[in_channels, h, w]`.
    pub fn geometry(&self, in_shape: &[usize]) -> Result<ConvGeometry> {
        if in_shape.len() != 3 || in_shape[0] != self.in_channels {
            return Err(shape_err(format!(
                "convolution expects [{}, H, W], got {:?}",
                self.in_channels, in_shape
            )));
        }
        geometry(
            self.in_channels,
            in_shape[1],
            in_shape[2],
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.padding,
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn geometry(
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    let (out_h, out_w, pad_top, pad_left) = match padding {
        Padding::Same => {
            let out_h = in_h.div_ceil(stride);
            let out_w = in_w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kernel_h).saturating_sub(in_h);
            let pad_w = ((out_w - 1) * stride + kernel_w).saturating_sub(in_w);
            (out_h, out_w, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => {
            if in_h < kernel_h || in_w < kernel_w {
                return Err(shape_err(format!(
                    "valid convolution with {kernel_h}x{kernel_w} kernel on {in_h}x{in_w} input"
                )));
            }
            ((in_h - kernel_h) / stride + 1, (in_w - kernel_w) / stride + 1, 0, 0)
        }
    };
    if in_h == 0 || in_w == 0 {
        return Err(shape_err("empty convolution input"));
    }
    Ok(ConvGeometry {
        in_channels,
        in_h,
        in_w,
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

/// Unrolls one `[C, H, W]` image into a `patch_len × out_pixels` matrix.
pub(crate) fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let np = g.out_pixels();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let np = g.out_pixels();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dx[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution of `n` images. `bias` may be `None` for the
/// bias-free variance path.
pub(crate) fn conv_batch(g: &ConvGeometry, x: &[f64], n: usize, kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let np = g.out_pixels();
    let mut out = vec![0.0; n * g.out_len()];
    let mut cols = vec![0.0; g.patch_len() * np];
    for (img, dst) in x.chunks_exact(g.in_len()).zip(out.chunks_exact_mut(g.out_len())) {
        im2col(g, img, &mut cols);
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(np).enumerate() {
                chunk.fill(b[oc]);
            }
        }
        gemm(g.out_channels, g.patch_len(), np, kernel, &cols, 1.0, dst);
    }
    out
}

fn batch_geometry(spec: &Conv2DSpec, shape: &[usize]) -> Result<(usize, ConvGeometry)> {
    let (n, features) = split_batch(shape, 3)?;
    Ok((n, spec.geometry(features)?))
}

/// Deterministic convolution of `[.., C, H, W]` inputs.
pub fn conv2d_forward(input: &Tensor, spec: &Conv2DSpec) -> Result<Tensor> {
    let (n, g) = batch_geometry(spec, input.shape())?;
    let out = conv_batch(&g, input.data(), n, &spec.kernel, Some(&spec.bias));
    Ok(Tensor::from_parts(with_features(input.shape(), 3, &[g.out_channels, g.out_h, g.out_w]), out))
}

/// Moment propagation: the expectation is convolved with the kernel (with
/// bias), the variance with the elementwise-squared kernel (without bias).
pub fn conv2d_mp(input: &MomentTensor, spec: &Conv2DSpec) -> Result<MomentTensor> {
    let (n, g) = batch_geometry(spec, input.shape())?;
    let e = conv_batch(&g, input.expectation(), n, &spec.kernel, Some(&spec.bias));
    let v = if input.variance().iter().all(|v| *v == 0.0) {
        vec![0.0; e.len()]
    } else {
        conv_batch(&g, input.variance(), n, &spec.kernel_sq, None)
    };
    let shape = with_features(input.shape(), 3, &[g.out_channels, g.out_h, g.out_w]);
    Ok(MomentTensor::from_parts(shape, e, v))
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of a batched convolution.
pub fn conv2d_backward(g: &ConvGeometry, x: &[f64], n: usize, kernel: &[f64], grad_out: &[f64]) -> ConvGrads {
    let np = g.out_pixels();
    let pl = g.patch_len();
    let mut gk = vec![0.0; g.out_channels * pl];
    let mut gb = vec![0.0; g.out_channels];
    let mut gx = vec![0.0; n * g.in_len()];
    let mut cols = vec![0.0; pl * np];
    let mut dcols = vec![0.0; pl * np];
    for i in 0..n {
        let img = &x[i * g.in_len()..(i + 1) * g.in_len()];
        let dy = &grad_out[i * g.out_len()..(i + 1) * g.out_len()];
        im2col(g, img, &mut cols);
        gemm_nt(g.out_channels, np, pl, dy, &cols, 1.0, &mut gk);
        for (oc, chunk) in dy.chunks_exact(np).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
        gemm_tn(pl, g.out_channels, np, kernel, dy, 0.0, &mut dcols);
        col2im(g, &dcols, &mut gx[i * g.in_len()..(i + 1) * g.in_len()]);
    }
    ConvGrads { input: gx, kernel: gk, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution with explicit zero padding.
    fn naive_conv(spec: &Conv2DSpec, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let g = spec.geometry(&[spec.in_channels(), h, w]).unwrap();
        let (kh, kw) = spec.kernel_size();
        let mut out = vec![0.0; g.out_len()];
        for oc in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = spec.bias()[oc];
                    for c in 0..g.in_channels {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += spec.kernel()[((oc * g.in_channels + c) * kh + ki) * kw + kj]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        (out, g.out_h, g.out_w)
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 0.7361).sin()).collect()
    }

    #[test]
    fn matches_naive_loops() {
        for &(padding, stride) in &[(Padding::Same, 1), (Padding::Valid, 1), (Padding::Same, 2), (Padding::Valid, 2)] {
            let spec = Conv2DSpec::new(3, 2, 3, 3, pseudo(54, 0.3), pseudo(3, 9.0), padding, stride).unwrap();
            let x = pseudo(2 * 7 * 6, 1.1);
            let (expected, oh, ow) = naive_conv(&spec, &x, 7, 6);
            let out = conv2d_forward(&Tensor::new(vec![2, 7, 6], x).unwrap(), &spec).unwrap();
            assert_eq!(out.shape(), &[3, oh, ow]);
            for (a, b) in out.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_keeps_size() {
        let spec = Conv2DSpec::new(1, 1, 3, 3, vec![0.0; 9], vec![0.0], Padding::Same, 1).unwrap();
        let g = spec.geometry(&[1, 32, 32]).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (32, 32, 1, 1));
    }

    #[test]
    fn one_by_one_kernel_is_scalar_affine() {
        let spec = Conv2DSpec::new(1, 1, 1, 1, vec![-2.0], vec![0.5], Padding::Same, 1).unwrap();
        let m = MomentTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 1.0, 0.0, 2.0]).unwrap();
        let out = conv2d_mp(&m, &spec).unwrap();
        assert_eq!(out.expectation(), &[-1.5, -3.5, -5.5, -7.5]);
        assert_eq!(out.variance(), &[2.0, 4.0, 0.0, 8.0]);
    }

    #[test]
    fn zero_variance_stays_zero() {
        let spec = Conv2DSpec::new(2, 1, 3, 3, pseudo(18, 0.0), vec![0.1, 0.2], Padding::Same, 1).unwrap();
        let x = Tensor::new(vec![1, 4, 4], pseudo(16, 2.0)).unwrap();
        let out = conv2d_mp(&MomentTensor::deterministic(&x), &spec).unwrap();
        assert!(out.variance().iter().all(|v| *v == 0.0));
        assert_eq!(out.expectation(), conv2d_forward(&x, &spec).unwrap().data());
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let spec = Conv2DSpec::new(1, 2, 3, 3, vec![0.0; 18], vec![0.0], Padding::Same, 1).unwrap();
        let x = Tensor::zeros(vec![1, 4, 4]);
        assert!(conv2d_forward(&x, &spec).is_err());
        assert!(Conv2DSpec::new(1, 1, 3, 3, vec![0.0; 9], vec![0.0], Padding::Same, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = geometry(2, 5, 4, 1, 3, 3, 2, Padding::Same).unwrap();
        let x = pseudo(g.in_len(), 0.5);
        let c = pseudo(g.patch_len() * g.out_pixels(), 3.3);
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
