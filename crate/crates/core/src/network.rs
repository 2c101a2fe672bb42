//! Sequential models and the three execution modes: deterministic,
//! MC-dropout sampling and moment propagation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{shape_err, Error, Result};
use crate::layers::dropout::sample_mask;
use crate::layers::softmax::softmax_mp;
use crate::layers::LayerSpec;
use crate::mc::{self, SampleBatch};
use crate::moments::{MomentTensor, MpDiagnostics};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    pub seed: u64,
    /// Digest of the training configuration that produced the weights.
    pub config_digest: String,
}

/// A sequential network plus everything needed to turn its output into a
/// predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    task: Task,
    /// Observation-noise precision τ (regression only), in target units.
    tau: Option<f64>,
    standardization: Option<Standardization>,
    pub metadata: ModelMetadata,
    // Per-example input shape of each layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        task: Task,
        tau: Option<f64>,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(shape_err(format!("invalid input shape {:?}", input_shape)));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::InvalidArgument("softmax may only be the final layer".into()));
            }
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| shape_err(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(next);
        }
        match task {
            Task::Classification => {
                if !matches!(layers.last(), Some(LayerSpec::Softmax)) {
                    return Err(Error::InvalidArgument("classification models must end in softmax".into()));
                }
                if tau.is_some() {
                    return Err(Error::InvalidArgument("tau only applies to regression models".into()));
                }
            }
            Task::Regression => {
                match layers.last() {
                    Some(LayerSpec::Dense(d)) if d.out_dim() == 1 => {}
                    _ => {
                        return Err(Error::InvalidArgument(
                            "regression models must end in a dense layer with a single output".into(),
                        ))
                    }
                }
                match tau {
                    Some(t) if t > 0.0 && t.is_finite() => {}
                    _ => return Err(Error::InvalidArgument("regression models need a positive tau".into())),
                }
            }
        }
        Ok(Self { layers, input_shape, task, tau, standardization: None, metadata, shapes })
    }

    pub fn with_standardization(mut self, s: Option<Standardization>) -> Self {
        self.standardization = s;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if self.task != Task::Regression || !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("cannot set tau {tau} on this model")));
        }
        self.tau = Some(tau);
        Ok(self)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Per-example input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Per-example shape of the last layer before any softmax.
    pub fn logits_shape(&self) -> &[usize] {
        &self.shapes[self.layers.len() - usize::from(self.ends_in_softmax())]
    }

    /// Standardises raw input features with the stored training statistics
    /// (identity when the model carries none).
    pub fn standardize_input(&self, input: &Tensor) -> Tensor {
        let mut x = input.clone();
        if let Some(s) = &self.standardization {
            if s.feature_mean.len() == self.input_shape.iter().product::<usize>() {
                s.apply_features(x.data_mut());
            }
        }
        x
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout(d) if d.rate() > 0.0))
    }

    fn ends_in_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Returns the input as a batch plus whether it was a single example.
    fn as_batch(&self, input: &Tensor) -> Result<(Tensor, bool)> {
        let shape = input.shape();
        if shape == self.input_shape.as_slice() {
            let mut batched = vec![1];
            batched.extend_from_slice(shape);
            return Ok((input.clone().reshape(batched)?, true));
        }
        if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] {
            if shape[0] == 0 {
                return Err(shape_err("empty batch"));
            }
            return Ok((input.clone(), false));
        }
        Err(shape_err(format!(
            "input shape {:?} does not match model input {:?} (optionally batched)",
            shape, self.input_shape
        )))
    }

    fn unbatch(t: Tensor, single: bool) -> Tensor {
        if single {
            let shape = t.shape()[1..].to_vec();
            t.reshape(shape).expect("batch of one")
        } else {
            t
        }
    }

    fn run_deterministic(&self, x: Tensor, layers: usize) -> Result<Tensor> {
        let mut parts = Vec::new();
        for mut chunk in row_chunks(&x) {
            for (i, layer) in self.layers[..layers].iter().enumerate() {
                chunk = layer.forward(&chunk, &self.shapes[i])?;
            }
            parts.push(chunk);
        }
        Ok(concat_rows(parts))
    }

    /// Test-time forward of the network as a plain NN (dropout scaled out).
    pub fn forward_deterministic(&self, input: &Tensor) -> Result<Tensor> {
        let (x, single) = self.as_batch(input)?;
        Ok(Self::unbatch(self.run_deterministic(x, self.layers.len())?, single))
    }

    /// Deterministic forward stopping before a trailing softmax.
    pub fn logits_deterministic(&self, input: &Tensor) -> Result<Tensor> {
        let (x, single) = self.as_batch(input)?;
        let n = self.layers.len() - usize::from(self.ends_in_softmax());
        Ok(Self::unbatch(self.run_deterministic(x, n)?, single))
    }

    /// One stochastic forward with masks drawn from `masks`.
    pub fn forward_sampled(&self, input: &Tensor, masks: &mut dyn MaskSource) -> Result<Tensor> {
        self.run_sampled(input, masks, self.layers.len())
    }

    /// Stochastic forward stopping before a trailing softmax.
    pub fn logits_sampled(&self, input: &Tensor, masks: &mut dyn MaskSource) -> Result<Tensor> {
        self.run_sampled(input, masks, self.layers.len() - usize::from(self.ends_in_softmax()))
    }

    fn run_sampled(&self, input: &Tensor, masks: &mut dyn MaskSource, layers: usize) -> Result<Tensor> {
        let (mut x, single) = self.as_batch(input)?;
        let rows = x.shape()[0];
        for (i, layer) in self.layers[..layers].iter().enumerate() {
            x = match layer {
                LayerSpec::Dropout(d) => {
                    let mut mask = vec![0.0; x.len()];
                    masks.fill(i, d.keep(), rows, &mut mask);
                    for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    x
                }
                other => other.forward(&x, &self.shapes[i])?,
            };
        }
        Ok(Self::unbatch(x, single))
    }

    /// Single-pass moment propagation. The input carries zero variance.
    pub fn forward_mp(&self, input: &Tensor) -> Result<MpOutput> {
        let (x, single) = self.as_batch(input)?;
        let mut diagnostics = MpDiagnostics::default();
        let n = self.layers.len() - usize::from(self.ends_in_softmax());
        let (mut e, mut v, mut p) = (Vec::new(), Vec::new(), Vec::new());
        let mut out_shape = Vec::new();
        for chunk in row_chunks(&x) {
            let mut m = MomentTensor::deterministic(&chunk);
            for (i, layer) in self.layers[..n].iter().enumerate() {
                m = layer.forward_mp_owned(m, &self.shapes[i], &mut diagnostics)?;
            }
            if self.ends_in_softmax() {
                p.extend_from_slice(softmax_mp(&m)?.data());
            }
            let (shape, ce, cv) = m.into_parts();
            out_shape = shape;
            e.extend(ce);
            v.extend(cv);
        }
        out_shape[0] = x.shape()[0];
        let probabilities = if self.ends_in_softmax() { Some(Tensor::from_parts(out_shape.clone(), p)) } else { None };
        let mut m = MomentTensor::from_parts(out_shape, e, v);
        if single {
            let shape = m.shape()[1..].to_vec();
            m = m.reshape(shape)?;
        }
        let probabilities = probabilities.map(|p| Self::unbatch(p, single));
        Ok(MpOutput { moments: m, probabilities, diagnostics })
    }

    /// Predictive distributions for a single example or a batch.
    pub fn predict(&self, input: &Tensor, mode: ForwardMode) -> Result<Vec<PredictiveDistribution>> {
        let (x, _) = self.as_batch(input)?;
        let rows = x.shape()[0];
        let out_len: usize = self.output_shape().iter().product();
        match mode {
            ForwardMode::Deterministic => {
                let y = self.run_deterministic(x, self.layers.len())?;
                Ok(y.data()
                    .chunks_exact(out_len)
                    .map(|r| self.distribution(r.to_vec(), 0.0))
                    .collect())
            }
            ForwardMode::MomentPropagation => {
                let out = self.forward_mp(&x)?;
                match out.probabilities {
                    Some(p) => Ok(p.data().chunks_exact(out_len).map(|r| self.distribution(r.to_vec(), 0.0)).collect()),
                    None => Ok((0..rows)
                        .map(|i| self.distribution(vec![out.moments.expectation()[i]], out.moments.variance()[i]))
                        .collect()),
                }
            }
            ForwardMode::McSample { samples, seed } => {
                if self.task == Task::Regression && samples < 2 {
                    return Err(Error::IncompatibleMode {
                        mode: "mc-sample",
                        reason: "a regression predictive variance needs at least 2 samples".into(),
                    });
                }
                let batches = mc::mc_forward_batch(self, &x, samples, seed)?;
                batches
                    .iter()
                    .map(|b| match self.task {
                        Task::Classification => Ok(self.distribution(b.mean(), 0.0)),
                        Task::Regression => {
                            let est = mc::estimate_moments(b)?;
                            Ok(self.distribution(est.mean, est.variance[0]))
                        }
                    })
                    .collect()
            }
        }
    }

    /// Builds a predictive distribution from network-space outputs,
    /// undoing target standardisation for regression.
    fn distribution(&self, out: Vec<f64>, variance: f64) -> PredictiveDistribution {
        match self.task {
            Task::Classification => PredictiveDistribution::Categorical { probs: out },
            Task::Regression => {
                let (mean, var) = match &self.standardization {
                    Some(s) => (s.target_mean + s.target_std * out[0], variance * s.target_std * s.target_std),
                    None => (out[0], variance),
                };
                PredictiveDistribution::Gaussian { mean, variance: var, tau: self.tau.unwrap() }
            }
        }
    }
}

// Batches are pushed through the network a few rows at a time so that the
// intermediate activations stay in cache.
const ROW_CHUNK: usize = 16;

fn row_chunks(x: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let rows = x.shape()[0];
    let row_len = x.len() / rows.max(1);
    (0..rows).step_by(ROW_CHUNK).map(move |r| {
        let end = (r + ROW_CHUNK).min(rows);
        let mut shape = x.shape().to_vec();
        shape[0] = end - r;
        Tensor::from_parts(shape, x.data()[r * row_len..end * row_len].to_vec())
    })
}

fn concat_rows(parts: Vec<Tensor>) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_parts(shape, data)
}

/// Output of a moment-propagation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MpOutput {
    /// Moments of the last layer before any softmax.
    pub moments: MomentTensor,
    /// Expected class probabilities when the model ends in softmax.
    pub probabilities: Option<Tensor>,
    pub diagnostics: MpDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ForwardMode {
    Deterministic,
    McSample { samples: usize, seed: u64 },
    MomentPropagation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOutput {
    Point(Tensor),
    /// One sample batch per input example.
    Samples(Vec<SampleBatch>),
    Moments(MpOutput),
}

/// Runs `model` on a single example or batch in the requested mode.
pub fn forward(model: &ModelSpec, input: &Tensor, mode: ForwardMode) -> Result<ForwardOutput> {
    match mode {
        ForwardMode::Deterministic => Ok(ForwardOutput::Point(model.forward_deterministic(input)?)),
        ForwardMode::MomentPropagation => Ok(ForwardOutput::Moments(model.forward_mp(input)?)),
        ForwardMode::McSample { samples, seed } => {
            let (x, _) = model.as_batch(input)?;
            Ok(ForwardOutput::Samples(mc::mc_forward_batch(model, &x, samples, seed)?))
        }
    }
}

/// Predictive distribution of a single example.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveDistribution {
    /// `N(y; mean, variance + 1/tau)`; `variance` is the epistemic part.
    Gaussian { mean: f64, variance: f64, tau: f64 },
    Categorical { probs: Vec<f64> },
}

impl PredictiveDistribution {
    /// Total predictive variance of a Gaussian prediction.
    pub fn predictive_variance(&self) -> Option<f64> {
        match self {
            PredictiveDistribution::Gaussian { variance, tau, .. } => Some(variance + 1.0 / tau),
            PredictiveDistribution::Categorical { .. } => None,
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            PredictiveDistribution::Categorical { probs } => Some(probs),
            PredictiveDistribution::Gaussian { .. } => None,
        }
    }

    /// Index of the most probable class.
    pub fn argmax(&self) -> Option<usize> {
        self.probs().map(|p| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
    }
}

/// Source of dropout keep-masks for stochastic forwards.
pub trait MaskSource {
    /// Fills `mask` (laid out as `rows` equal rows) for dropout layer `layer`.
    fn fill(&mut self, layer: usize, keep: f64, rows: usize, mask: &mut [f64]);
}

/// Draws all masks from one sequential generator (used in training).
pub struct SequentialMasks<'a, R: Rng>(pub &'a mut R);

impl<R: Rng> MaskSource for SequentialMasks<'_, R> {
    fn fill(&mut self, _layer: usize, keep: f64, _rows: usize, mask: &mut [f64]) {
        sample_mask(keep, self.0, mask);
    }
}

/// Counter-based masks: row `r` of a batch is MC sample `first_sample + r`,
/// and its mask at layer `l` comes from the stream keyed by
/// `(seed, sample, l)`. Results therefore do not depend on how samples are
/// grouped into batches or threads.
pub struct CounterMasks {
    pub seed: u64,
    pub first_sample: u64,
}

impl MaskSource for CounterMasks {
    fn fill(&mut self, layer: usize, keep: f64, rows: usize, mask: &mut [f64]) {
        let row_len = mask.len() / rows;
        for (r, chunk) in mask.chunks_exact_mut(row_len).enumerate() {
            let mut rng: ChaCha8Rng = stream_rng(self.seed, self.first_sample + r as u64, layer as u64);
            sample_mask(keep, &mut rng, chunk);
        }
    }
}
