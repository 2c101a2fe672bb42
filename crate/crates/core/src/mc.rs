//! MC-dropout sampling and the brute-force statistical oracles used to check
//! the moment formulas.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::layers::LayerSpec;
use crate::moments::MomentTensor;
use crate::network::{CounterMasks, ModelSpec};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

/// Samples evaluated per stochastic forward call.
const SAMPLE_CHUNK: usize = 256;

/// `T` stochastic outputs for one input example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    outputs: Vec<f64>,
    output_shape: Vec<usize>,
    samples: usize,
    seed: u64,
}

impl SampleBatch {
    pub fn new(outputs: Vec<f64>, output_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let len: usize = output_shape.iter().product();
        if len == 0 || outputs.is_empty() || outputs.len() % len != 0 {
            return Err(shape_err(format!(
                "{} values do not form samples of shape {:?}",
                outputs.len(),
                output_shape
            )));
        }
        let samples = outputs.len() / len;
        Ok(Self { outputs, output_shape, samples, seed })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn output_len(&self) -> usize {
        self.outputs.len() / self.samples
    }

    /// All outputs, `samples × output_len`, row-major.
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn sample(&self, t: usize) -> &[f64] {
        let len = self.output_len();
        &self.outputs[t * len..(t + 1) * len]
    }

    /// Values of output component `i` across samples.
    pub fn component(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.outputs.iter().skip(i).step_by(self.output_len()).copied()
    }

    /// The first `t` samples as their own batch.
    pub fn truncate(&self, t: usize) -> Result<SampleBatch> {
        if t == 0 || t > self.samples {
            return Err(Error::InvalidArgument(format!("cannot take {t} of {} samples", self.samples)));
        }
        SampleBatch::new(self.outputs[..t * self.output_len()].to_vec(), self.output_shape.clone(), self.seed)
    }

    pub fn mean(&self) -> Vec<f64> {
        let len = self.output_len();
        let mut m = vec![0.0; len];
        for row in self.outputs.chunks_exact(len) {
            for (a, x) in m.iter_mut().zip(row) {
                *a += x;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.samples as f64);
        m
    }
}

/// Per-component sample moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mean: Vec<f64>,
    /// Unbiased (divisor `T - 1`).
    pub variance: Vec<f64>,
    pub standard_error_mean: Vec<f64>,
    /// Standard error of the sample variance, from the fourth central moment.
    pub standard_error_variance: Vec<f64>,
    pub samples: usize,
}

/// Streaming power sums about a fixed shift.
#[derive(Debug, Clone)]
struct PowerSums {
    n: usize,
    shift: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
    s4: Vec<f64>,
}

impl PowerSums {
    fn new(shift: Vec<f64>) -> Self {
        let k = shift.len();
        Self { n: 0, shift, s1: vec![0.0; k], s2: vec![0.0; k], s3: vec![0.0; k], s4: vec![0.0; k] }
    }

    fn push_rows(&mut self, rows: &[f64]) {
        let k = self.shift.len();
        for row in rows.chunks_exact(k) {
            for j in 0..k {
                let d = row[j] - self.shift[j];
                let d2 = d * d;
                self.s1[j] += d;
                self.s2[j] += d2;
                self.s3[j] += d2 * d;
                self.s4[j] += d2 * d2;
            }
            self.n += 1;
        }
    }

    fn merge(&mut self, other: &PowerSums) {
        self.n += other.n;
        for j in 0..self.shift.len() {
            self.s1[j] += other.s1[j];
            self.s2[j] += other.s2[j];
            self.s3[j] += other.s3[j];
            self.s4[j] += other.s4[j];
        }
    }

    fn finish(&self) -> Result<MomentEstimate> {
        let t = self.n;
        if t < 2 {
            return Err(Error::InvalidArgument(format!("moment estimation needs at least 2 samples, got {t}")));
        }
        let nf = t as f64;
        let k = self.shift.len();
        let mut est = MomentEstimate {
            mean: Vec::with_capacity(k),
            variance: Vec::with_capacity(k),
            standard_error_mean: Vec::with_capacity(k),
            standard_error_variance: Vec::with_capacity(k),
            samples: t,
        };
        for j in 0..k {
            let m1 = self.s1[j] / nf;
            let (r2, r3, r4) = (self.s2[j] / nf, self.s3[j] / nf, self.s4[j] / nf);
            // Central moments from raw moments about the shift.
            let c2 = (r2 - m1 * m1).max(0.0);
            let c4 = (r4 - 4.0 * m1 * r3 + 6.0 * m1 * m1 * r2 - 3.0 * m1.powi(4)).max(0.0);
            let var = c2 * nf / (nf - 1.0);
            let var_of_var = ((c4 - var * var * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0);
            est.mean.push(self.shift[j] + m1);
            est.variance.push(var);
            est.standard_error_mean.push((var / nf).sqrt());
            est.standard_error_variance.push(var_of_var.sqrt());
        }
        Ok(est)
    }
}

/// Per-component mean, unbiased variance and standard errors.
pub fn estimate_moments(batch: &SampleBatch) -> Result<MomentEstimate> {
    let mut sums = PowerSums::new(batch.sample(0).to_vec());
    sums.push_rows(batch.outputs());
    sums.finish()
}

/// `T` independent stochastic forwards of one example.
pub fn mc_forward(model: &ModelSpec, input: &Tensor, samples: usize, seed: u64) -> Result<SampleBatch> {
    if input.shape() != model.input_shape() {
        return Err(shape_err(format!(
            "mc_forward takes a single example of shape {:?}, got {:?}",
            model.input_shape(),
            input.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = input.clone().reshape(shape)?;
    Ok(mc_forward_batch(model, &batch, samples, seed)?.remove(0))
}

/// MC forwards for every row of a batch. Row `i` uses the child seed
/// `derive_seed(seed, i)`, so row 0 reproduces [`mc_forward`].
pub fn mc_forward_batch(model: &ModelSpec, inputs: &Tensor, samples: usize, seed: u64) -> Result<Vec<SampleBatch>> {
    sample_rows(model, inputs, samples, seed, false)
}

/// Like [`mc_forward_batch`] but stops before a trailing softmax, with the
/// same masks (so sample `t` of both calls shares its dropout draws).
pub fn mc_logits_batch(model: &ModelSpec, inputs: &Tensor, samples: usize, seed: u64) -> Result<Vec<SampleBatch>> {
    sample_rows(model, inputs, samples, seed, true)
}

fn sample_rows(model: &ModelSpec, inputs: &Tensor, samples: usize, seed: u64, logits: bool) -> Result<Vec<SampleBatch>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("MC sampling needs at least one sample".into()));
    }
    if inputs.shape().len() != model.input_shape().len() + 1 || inputs.shape()[1..] != *model.input_shape() {
        return Err(shape_err(format!(
            "expected a batch of {:?}, got {:?}",
            model.input_shape(),
            inputs.shape()
        )));
    }
    let rows = inputs.shape()[0];
    let out_shape = if logits { model.logits_shape().to_vec() } else { model.output_shape().to_vec() };
    let chunks: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..samples).step_by(SAMPLE_CHUNK).map(move |s| (r, s)))
        .collect();
    let results: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|&(r, start)| {
            let count = SAMPLE_CHUNK.min(samples - start);
            let row = inputs.row(r);
            let mut shape = vec![count];
            shape.extend_from_slice(row.shape());
            let mut data = Vec::with_capacity(count * row.len());
            for _ in 0..count {
                data.extend_from_slice(row.data());
            }
            let x = Tensor::new(shape, data)?;
            let mut masks = CounterMasks { seed: derive_seed(seed, r as u64), first_sample: start as u64 };
            let out = if logits { model.logits_sampled(&x, &mut masks)? } else { model.forward_sampled(&x, &mut masks)? };
            Ok(out.into_data())
        })
        .collect();

    let mut per_row: Vec<Vec<f64>> = vec![Vec::new(); rows];
    for (&(r, _), out) in chunks.iter().zip(results) {
        per_row[r].extend(out?);
    }
    per_row
        .into_iter()
        .enumerate()
        .map(|(r, outputs)| SampleBatch::new(outputs, out_shape.clone(), derive_seed(seed, r as u64)))
        .collect()
}

/// Input law for [`layer_oracle`].
#[derive(Debug, Clone)]
pub enum OracleInput {
    /// Independent Gaussians `N(E_i, V_i)` per node.
    Gaussian(MomentTensor),
    Point(Tensor),
}

impl OracleInput {
    fn shape(&self) -> &[usize] {
        match self {
            OracleInput::Gaussian(m) => m.shape(),
            OracleInput::Point(t) => t.shape(),
        }
    }
}

const ORACLE_CHUNK: usize = 4096;

/// Estimates the output moments of one layer by brute force: draws
/// `n_samples` inputs, pushes each through the layer's stochastic forward and
/// returns the sample moments of the outputs.
pub fn layer_oracle(layer: &LayerSpec, input: &OracleInput, n_samples: usize, seed: u64) -> Result<MomentEstimate> {
    let features = input.shape().to_vec();
    let out_len: usize = layer.output_shape(&features)?.iter().product();
    let (mean, sd): (Vec<f64>, Vec<f64>) = match input {
        OracleInput::Gaussian(m) => (m.expectation().to_vec(), m.variance().iter().map(|v| v.sqrt()).collect()),
        OracleInput::Point(t) => (t.data().to_vec(), vec![0.0; t.len()]),
    };

    let run_chunk = |chunk: u64, count: usize| -> Result<Vec<f64>> {
        let mut rng = stream_rng(seed, chunk, 0);
        let in_len = mean.len();
        let mut data = Vec::with_capacity(count * in_len);
        for _ in 0..count {
            for (m, s) in mean.iter().zip(&sd) {
                let z: f64 = if *s > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                data.push(m + s * z);
            }
        }
        let mut shape = vec![count];
        shape.extend_from_slice(&features);
        let out = layer.forward_sampled(&Tensor::new(shape, data)?, &features, &mut rng)?;
        debug_assert_eq!(out.len(), count * out_len);
        Ok(out.into_data())
    };

    let n_chunks = n_samples.div_ceil(ORACLE_CHUNK);
    let count_of = |c: usize| ORACLE_CHUNK.min(n_samples - c * ORACLE_CHUNK);
    // A small pilot from a separate stream fixes the shift for the power sums.
    let pilot = run_chunk(u64::MAX, 64)?;
    let mut shift = vec![0.0; out_len];
    for row in pilot.chunks_exact(out_len) {
        for (s, x) in shift.iter_mut().zip(row) {
            *s += x / 64.0;
        }
    }

    let partial: Vec<Result<PowerSums>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let out = run_chunk(c as u64, count_of(c))?;
            let mut sums = PowerSums::new(shift.clone());
            sums.push_rows(&out);
            Ok(sums)
        })
        .collect();
    let mut total = PowerSums::new(shift.clone());
    for p in partial {
        total.merge(&p?);
    }
    total.finish()
}
