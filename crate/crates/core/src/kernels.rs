//! Elementwise moment kernels for ReLU and pairwise max.
//!
//! Each formula is written once as a branch-free lane function. The slice
//! loops over those lanes are also compiled with AVX2 and AVX-512 enabled,
//! picked at run time, so the compiler can vectorise them. Only IEEE basic
//! operations are used, so every build gives bit-identical results.

use crate::moments::VARIANCE_EPS;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// `exp(-h)` for `h ≥ 0`: Cody–Waite reduction and a degree-12 Taylor
/// polynomial; 0 beyond `h = 708`.
#[inline(always)]
fn exp_neg(h: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let t = -h.min(708.0);
    let w = t * LOG2E + MAGIC;
    let kf = w - MAGIC;
    let r = (t - kf * LN2_HI) - kf * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // The low mantissa bits of `w` hold k; build 2^k directly.
    let k_bits = w.to_bits().wrapping_sub(MAGIC.to_bits());
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    if h > 708.0 {
        0.0
    } else {
        p * scale
    }
}

// Cody's rational approximations for erfc, one per range of |x|/√2.
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const ERF_B: [f64; 4] = [2.360_129_095_234_412_1e1, 2.440_246_379_344_441_7e2, 1.282_616_526_077_372_3e3, 2.844_236_833_439_170_6e3];
const ERF_C: [f64; 9] = [
    5.641_884_969_886_700_9e-1,
    8.883_149_794_388_375_9e0,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const ERF_D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_098_6e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const ERF_P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const ERF_Q: [f64; 5] =
    [2.568_520_192_289_822_4e0, 1.872_952_849_923_467_3e0, 5.279_051_029_514_284e-1, 6.051_834_131_244_132e-2, 2.335_204_976_268_691_8e-3];

/// `(Φ(−|x|), φ(x))`.
///
/// Every range is evaluated as a single fraction; the numerator and
/// denominator are selected per lane and divided once.
#[inline(always)]
pub(crate) fn tail_pdf(x: f64) -> (f64, f64) {
    let g = exp_neg(0.5 * x * x);
    // Past |x|/√2 = 40 the tail underflows through g; the clamp keeps the
    // unused ranges finite.
    let y = (x.abs() * FRAC_1_SQRT_2).min(40.0);

    let ysq = y * y;
    let mut num = ERF_A[4] * ysq;
    let mut den = ysq;
    for i in 0..3 {
        num = (num + ERF_A[i]) * ysq;
        den = (den + ERF_B[i]) * ysq;
    }
    let (den_s, num_s) = (den + ERF_B[3], num + ERF_A[3]);
    let num_s = 0.5 * (den_s - y * num_s);

    let mut num = ERF_C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + ERF_C[i]) * y;
        den = (den + ERF_D[i]) * y;
    }
    let (num_m, den_m) = (0.5 * g * (num + ERF_C[7]), den + ERF_D[7]);

    // The asymptotic rational in 1/y², multiplied through by y^10.
    let yl = y.max(4.0);
    let w = yl * yl;
    let mut num = ERF_P[4];
    let mut den = ERF_Q[4];
    for i in (0..4).rev() {
        num = num * w + ERF_P[i];
        den = den * w + ERF_Q[i];
    }
    let num = num * w + ERF_P[5];
    let den = den * w + 1.0;
    let (num_l, den_l) = (0.5 * g * (FRAC_1_SQRT_PI * w * den - num), w * den * yl);

    let (num, den) = if y <= 0.468_75 {
        (num_s, den_s)
    } else if y <= 4.0 {
        (num_m, den_m)
    } else {
        (num_l, den_l)
    };
    (num / den, INV_SQRT_2PI * g)
}

/// ReLU moments before clamping: `(mean, E[Y²] − mean²)`.
#[inline(always)]
pub(crate) fn relu_lane(e: f64, v: f64) -> (f64, f64) {
    let point = v < VARIANCE_EPS;
    let sd = if point { 1.0 } else { v.sqrt() };
    let r = e / sd;
    let (tail, pdf) = tail_pdf(r);
    let cdf = if r >= 0.0 { 1.0 - tail } else { tail };
    let mean = e * cdf + sd * pdf;
    let second = (e * e + v) * cdf + e * sd * pdf;
    if point {
        (e.max(0.0), 0.0)
    } else {
        (mean, second - mean * mean)
    }
}

/// Moments of `max(A, B)` before clamping.
#[inline(always)]
pub(crate) fn pair_lane(ea: f64, va: f64, eb: f64, vb: f64) -> (f64, f64) {
    let theta = (va + vb).sqrt();
    let point = theta < VARIANCE_EPS;
    // Centring on the larger mean keeps the second-moment subtraction well
    // conditioned; both moments are shift-equivariant.
    let shift = ea.max(eb);
    let (e1, e2) = (ea - shift, eb - shift);
    let alpha = (e1 - e2) / if point { 1.0 } else { theta };
    let (tail, pdf) = tail_pdf(alpha);
    let (cdf1, cdf2) = if alpha >= 0.0 { (1.0 - tail, tail) } else { (tail, 1.0 - tail) };
    let mean = e1 * cdf1 + e2 * cdf2 + theta * pdf;
    let second = (va + e1 * e1) * cdf1 + (vb + e2 * e2) * cdf2 + (e1 + e2) * theta * pdf;
    if point {
        if ea >= eb {
            (ea, va)
        } else {
            (eb, vb)
        }
    } else {
        (mean + shift, second - mean * mean)
    }
}

#[inline(always)]
fn clamp_count(v: f64, clamped: &mut usize) -> f64 {
    *clamped += usize::from(v < 0.0);
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

#[inline(always)]
fn relu_loop(e: &mut [f64], v: &mut [f64]) -> usize {
    let mut clamped = 0;
    for (ei, vi) in e.iter_mut().zip(v.iter_mut()) {
        let (m, var) = relu_lane(*ei, *vi);
        *ei = m;
        *vi = clamp_count(var, &mut clamped);
    }
    clamped
}

#[inline(always)]
fn pair_loop(ea: &mut [f64], va: &mut [f64], eb: &[f64], vb: &[f64]) -> usize {
    let mut clamped = 0;
    let n = ea.len();
    let (va, eb, vb) = (&mut va[..n], &eb[..n], &vb[..n]);
    for i in 0..n {
        let (m, var) = pair_lane(ea[i], va[i], eb[i], vb[i]);
        ea[i] = m;
        va[i] = clamp_count(var, &mut clamped);
    }
    clamped
}

#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn relu_loop_avx512(e: &mut [f64], v: &mut [f64]) -> usize {
        super::relu_loop(e, v)
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn pair_loop_avx512(ea: &mut [f64], va: &mut [f64], eb: &[f64], vb: &[f64]) -> usize {
        super::pair_loop(ea, va, eb, vb)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn relu_loop_avx2(e: &mut [f64], v: &mut [f64]) -> usize {
        super::relu_loop(e, v)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn pair_loop_avx2(ea: &mut [f64], va: &mut [f64], eb: &[f64], vb: &[f64]) -> usize {
        super::pair_loop(ea, va, eb, vb)
    }

    #[derive(Clone, Copy, PartialEq)]
    pub(super) enum Level {
        Base,
        Avx2,
        Avx512,
    }

    pub(super) fn level() -> Level {
        use std::sync::OnceLock;
        static LEVEL: OnceLock<Level> = OnceLock::new();
        *LEVEL.get_or_init(|| {
            if std::arch::is_x86_feature_detected!("avx512f") {
                Level::Avx512
            } else if std::arch::is_x86_feature_detected!("avx2") {
                Level::Avx2
            } else {
                Level::Base
            }
        })
    }
}

/// ReLU moments in place; returns the number of clamped variances.
pub(crate) fn relu_slice(e: &mut [f64], v: &mut [f64]) -> usize {
    assert_eq!(e.len(), v.len());
    #[cfg(target_arch = "x86_64")]
    // SAFETY: each variant runs only on a CPU reporting its feature.
    match wide::level() {
        wide::Level::Avx512 => return unsafe { wide::relu_loop_avx512(e, v) },
        wide::Level::Avx2 => return unsafe { wide::relu_loop_avx2(e, v) },
        wide::Level::Base => {}
    }
    relu_loop(e, v)
}

/// `(ea, va) ← max((ea, va), (eb, vb))` elementwise; returns the number of
/// clamped variances.
pub(crate) fn pair_slice(ea: &mut [f64], va: &mut [f64], eb: &[f64], vb: &[f64]) -> usize {
    assert!(va.len() == ea.len() && eb.len() == ea.len() && vb.len() == ea.len());
    #[cfg(target_arch = "x86_64")]
    // SAFETY: each variant runs only on a CPU reporting its feature.
    match wide::level() {
        wide::Level::Avx512 => return unsafe { wide::pair_loop_avx512(ea, va, eb, vb) },
        wide::Level::Avx2 => return unsafe { wide::pair_loop_avx2(ea, va, eb, vb) },
        wide::Level::Base => {}
    }
    pair_loop(ea, va, eb, vb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{std_normal_cdf, std_normal_pdf};

    #[test]
    fn exp_matches_std() {
        let mut worst = 0.0f64;
        let mut h = 0.0f64;
        while h < 700.0 {
            let want = (-h).exp();
            worst = worst.max(((exp_neg(h) - want) / want).abs());
            h += 0.0173;
        }
        assert!(worst < 2e-15, "{worst:e}");
        assert_eq!(exp_neg(0.0), 1.0);
        assert_eq!(exp_neg(800.0), 0.0);
    }

    #[test]
    fn tail_and_pdf_match_reference() {
        // Beyond |x| ≈ 37 the tail is subnormal and relative error is meaningless.
        let (mut wt, mut wp) = (0.0f64, 0.0f64);
        let mut x = -37.0;
        while x <= 37.0 {
            let (tail, pdf) = tail_pdf(x);
            let t = std_normal_cdf(-x.abs());
            let p = std_normal_pdf(x);
            wt = wt.max(((tail - t) / t).abs());
            wp = wp.max(((pdf - p) / p).abs());
            x += 0.00137;
        }
        assert!(wt < 1e-12, "tail {wt:e}");
        assert!(wp < 1e-12, "pdf {wp:e}");
    }

    #[test]
    fn slices_match_lanes() {
        let n = 37;
        let e: Vec<f64> = (0..n).map(|i| (i as f64 * 0.618).sin() * 3.0).collect();
        let v: Vec<f64> = (0..n).map(|i| if i % 5 == 0 { 0.0 } else { (i as f64 * 0.3).cos().abs() }).collect();
        let (mut e1, mut v1) = (e.clone(), v.clone());
        relu_slice(&mut e1, &mut v1);
        let (mut e2, mut v2) = (e.clone(), v.clone());
        relu_loop(&mut e2, &mut v2);
        assert_eq!((&e1, &v1), (&e2, &v2));
        for i in 0..n {
            let (m, var) = relu_lane(e[i], v[i]);
            assert_eq!(m, e2[i]);
            assert_eq!(var.max(0.0), v2[i]);
        }
        let (eb, vb): (Vec<f64>, Vec<f64>) = (e.iter().rev().copied().collect(), v.iter().rev().copied().collect());
        let (mut ea, mut va) = (e.clone(), v.clone());
        pair_slice(&mut ea, &mut va, &eb, &vb);
        let (mut ea2, mut va2) = (e.clone(), v.clone());
        pair_loop(&mut ea2, &mut va2, &eb, &vb);
        assert_eq!((ea, va), (ea2, va2));
    }
}
