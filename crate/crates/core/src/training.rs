//! Minibatch training of dropout networks.
//!
//! Gradients are accumulated in reverse through the same layer kernels used
//! for inference, with dropout applied as sampled, unscaled Bernoulli masks.
//! Parameters are kept in f64 while training and rounded to f32 precision when
//! written back into a [`ModelSpec`].

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitDataset, Targets};
use crate::error::{Error, Result};
use crate::layers::conv::conv_batch;
use crate::layers::dense::affine;
use crate::layers::dropout::sample_mask;
use crate::layers::softmax::softmax_in_place;
use crate::layers::{
    conv2d_backward, dense_backward, maxpool2d_backward, maxpool2d_forward_with_argmax, Conv2DSpec, ConvGeometry,
    DenseSpec, DropoutSpec, LayerSpec, MaxPool2DSpec, Padding,
};
use crate::mc::mc_forward_batch;
use crate::metrics::{regression_nll_mc_slice, regression_nll_mp};
use crate::network::{ModelMetadata, ModelSpec, PredictiveDistribution, Task};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Model construction

#[derive(Debug, Clone, PartialEq)]
enum Planned {
    Dense(usize),
    Conv { out: usize, kernel: usize, padding: Padding },
    Pool(usize),
    Relu,
    Dropout(f64),
    Flatten,
    Softmax,
}

/// Declarative builder that initialises weights with fan-in scaled uniform
/// draws, `U(-√(6/fan_in), √(6/fan_in))`, and zero biases.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    plan: Vec<Planned>,
}

impl ModelBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self { input_shape, plan: Vec::new() }
    }

    pub fn dense(mut self, out: usize) -> Self {
        self.plan.push(Planned::Dense(out));
        self
    }

    pub fn conv2d(mut self, out_channels: usize, kernel: usize) -> Self {
        self.plan.push(Planned::Conv { out: out_channels, kernel, padding: Padding::Same });
        self
    }

    pub fn conv2d_valid(mut self, out_channels: usize, kernel: usize) -> Self {
        self.plan.push(Planned::Conv { out: out_channels, kernel, padding: Padding::Valid });
        self
    }

    pub fn maxpool(mut self, size: usize) -> Self {
        self.plan.push(Planned::Pool(size));
        self
    }

    pub fn relu(mut self) -> Self {
        self.plan.push(Planned::Relu);
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.plan.push(Planned::Dropout(rate));
        self
    }

    pub fn flatten(mut self) -> Self {
        self.plan.push(Planned::Flatten);
        self
    }

    pub fn softmax(mut self) -> Self {
        self.plan.push(Planned::Softmax);
        self
    }

    pub fn build(self, task: Task, tau: Option<f64>, seed: u64) -> Result<ModelSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.plan.len());
        for step in &self.plan {
            let layer = match *step {
                Planned::Dense(out) => {
                    if shape.len() != 1 {
                        return Err(Error::InvalidArgument(format!("dense layer after shape {shape:?}; add flatten")));
                    }
                    let fan_in = shape[0];
                    let w = he_uniform(&mut rng, fan_in, fan_in * out);
                    LayerSpec::Dense(DenseSpec::new(fan_in, out, w, vec![0.0; out])?)
                }
                Planned::Conv { out, kernel, padding } => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidArgument(format!("conv layer after shape {shape:?}")));
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    let k = he_uniform(&mut rng, fan_in, out * fan_in);
                    LayerSpec::Conv2d(Conv2DSpec::new(out, shape[0], kernel, kernel, k, vec![0.0; out], padding, 1)?)
                }
                Planned::Pool(n) => LayerSpec::MaxPool2d(MaxPool2DSpec::new(n)?),
                Planned::Relu => LayerSpec::Relu,
                Planned::Dropout(p) => LayerSpec::Dropout(DropoutSpec::new(p)?),
                Planned::Flatten => LayerSpec::Flatten,
                Planned::Softmax => LayerSpec::Softmax,
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        let metadata = ModelMetadata { name: String::new(), seed, config_digest: String::new() };
        ModelSpec::new(layers, self.input_shape, task, tau, metadata)
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Architecture families used by the experiments and config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// `dense → relu → dropout` per hidden layer, then a dense output.
    Mlp { hidden: Vec<usize>, dropout: f64 },
    /// `conv → relu → maxpool(2) → dropout` per channel entry, flatten,
    /// `dense → relu → dropout` per dense entry, then dense + softmax.
    Cnn {
        channels: Vec<usize>,
        dense: Vec<usize>,
        dropout: f64,
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
}

fn default_kernel() -> usize {
    3
}

impl Architecture {
    pub fn dropout(&self) -> f64 {
        match self {
            Architecture::Mlp { dropout, .. } | Architecture::Cnn { dropout, .. } => *dropout,
        }
    }

    pub fn with_dropout(&self, p: f64) -> Architecture {
        let mut a = self.clone();
        match &mut a {
            Architecture::Mlp { dropout, .. } | Architecture::Cnn { dropout, .. } => *dropout = p,
        }
        a
    }

    /// Builds a regression model (single output) or a classifier over `outputs` classes.
    pub fn build(&self, input_shape: &[usize], task: Task, outputs: usize, tau: Option<f64>, seed: u64) -> Result<ModelSpec> {
        let mut b = ModelBuilder::new(input_shape.to_vec());
        match self {
            Architecture::Mlp { hidden, dropout } => {
                if input_shape.len() != 1 {
                    b = b.flatten();
                }
                for &h in hidden {
                    b = b.dense(h).relu().dropout(*dropout);
                }
            }
            Architecture::Cnn { channels, dense, dropout, kernel } => {
                for &c in channels {
                    b = b.conv2d(c, *kernel).relu().maxpool(2).dropout(*dropout);
                }
                b = b.flatten();
                for &d in dense {
                    b = b.dense(d).relu().dropout(*dropout);
                }
            }
        }
        b = match task {
            Task::Regression => b.dense(1),
            Task::Classification => b.dense(outputs).softmax(),
        };
        b.build(task, tau, seed)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CategoricalNll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` epochs without improvement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrReduction {
    pub patience: usize,
    pub factor: f64,
}

impl Default for LrReduction {
    fn default() -> Self {
        Self { patience: 5, factor: 0.85 }
    }
}

/// Stop after `patience` epochs without improvement of the monitored loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { patience: 10 }
    }
}

/// Training hyper-parameters. Every field has a default, so a config file
/// only needs the fields it changes.
///
/// The monitored quantity is the training loss evaluated on the validation
/// split with the deterministic forward (or the epoch's mean training loss
/// when the validation split is empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: Loss,
    /// Overrides the rates of the model's dropout layers, in order.
    pub dropout_rates: Option<Vec<f64>>,
    /// L2 penalty on weights (not biases).
    pub weight_decay: f64,
    /// `false` in a config file disables it.
    #[serde(with = "switch")]
    pub lr_reduction: Option<LrReduction>,
    /// `false` in a config file disables it.
    #[serde(with = "switch")]
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
}

/// An optional setting written as its table when on and as `false` when off,
/// since TOML has no null.
mod switch {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => x.serialize(s),
            None => s.serialize_bool(false),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<T>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr<T> {
            Flag(bool),
            Value(T),
        }
        match Repr::deserialize(d)? {
            Repr::Flag(false) => Ok(None),
            Repr::Flag(true) => Err(D::Error::custom("give the settings as a table to enable, or false to disable")),
            Repr::Value(t) => Ok(Some(t)),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: Optimizer::default(),
            loss: Loss::Mse,
            dropout_rates: None,
            weight_decay: 0.0,
            lr_reduction: Some(LrReduction::default()),
            early_stopping: Some(EarlyStopping::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.optimizer.lr() > 0.0 && self.optimizer.lr().is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr()));
        }
        if let Optimizer::Adam { beta1, beta2, eps, .. } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
            }
        }
        if let Optimizer::Sgd { momentum, .. } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return bad("sgd momentum must lie in [0, 1)".into());
            }
        }
        if let Some(r) = self.lr_reduction {
            if !(r.factor > 0.0 && r.factor < 1.0) || r.patience == 0 {
                return bad("lr_reduction needs 0 < factor < 1 and patience >= 1".into());
            }
        }
        if let Some(e) = self.early_stopping {
            if e.patience == 0 {
                return bad("early_stopping patience must be at least 1".into());
            }
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if let Some(rates) = &self.dropout_rates {
            if rates.iter().any(|p| !(0.0..1.0).contains(p)) {
                return bad("dropout rates must lie in [0, 1)".into());
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` or `.json` config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&text)
        } else {
            Self::from_json_str(&text)
        }
    }

    /// CRC-32 of the canonical JSON encoding, as 8 hex digits.
    pub fn digest(&self) -> String {
        format!("{:08x}", crc32fast::hash(&serde_json::to_vec(self).expect("config serialises")))
    }
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Monitored loss per epoch.
    pub validation_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Monitored loss before the first update.
    pub initial_validation_loss: f64,
    /// Zero-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_clock_seconds: f64,
}

// ---------------------------------------------------------------------------
// Differentiable network

#[derive(Debug, Clone)]
enum Op {
    Dropout { rate: f64 },
    Dense { in_dim: usize, out_dim: usize, param: usize },
    Conv { g: ConvGeometry, param: usize, padding: Padding },
    Pool { spec: MaxPool2DSpec, in_shape: Vec<usize> },
    Relu,
    Flatten,
    Softmax,
}

enum Cache {
    None,
    Input(Vec<f64>),
    Mask(Vec<f64>),
    Argmax(Vec<usize>, usize),
}

/// Parameter gradients (one entry per parameter tensor, in
/// [`Trainable::params`] order) and the gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

/// A model unpacked into f64 parameter tensors for gradient training.
///
/// Parameter tensors alternate weights and biases for every dense and conv
/// layer, in layer order.
#[derive(Debug, Clone)]
pub struct Trainable {
    template: ModelSpec,
    ops: Vec<Op>,
    params: Vec<Vec<f64>>,
    input_len: usize,
}

impl Trainable {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let mut ops = Vec::new();
        let mut params = Vec::new();
        for (i, layer) in model.layers().iter().enumerate() {
            let shape = model.layer_input_shape(i);
            ops.push(match layer {
                LayerSpec::Dropout(d) => Op::Dropout { rate: d.rate() },
                LayerSpec::Dense(d) => {
                    params.push(d.weights().to_vec());
                    params.push(d.bias().to_vec());
                    Op::Dense { in_dim: d.in_dim(), out_dim: d.out_dim(), param: params.len() - 2 }
                }
                LayerSpec::Conv2d(c) => {
                    params.push(c.kernel().to_vec());
                    params.push(c.bias().to_vec());
                    Op::Conv { g: c.geometry(shape)?, param: params.len() - 2, padding: c.padding() }
                }
                LayerSpec::MaxPool2d(p) => Op::Pool { spec: *p, in_shape: shape.to_vec() },
                LayerSpec::Relu => Op::Relu,
                LayerSpec::Flatten => Op::Flatten,
                LayerSpec::Softmax => Op::Softmax,
            });
        }
        Ok(Self { template: model.clone(), ops, params, input_len: model.input_shape().iter().product() })
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    /// Overrides the dropout rates, in layer order.
    pub fn set_dropout_rates(&mut self, rates: &[f64]) -> Result<()> {
        let n = self.ops.iter().filter(|o| matches!(o, Op::Dropout { .. })).count();
        if rates.len() != n {
            return Err(Error::Config(format!("{} dropout rates given for {n} dropout layers", rates.len())));
        }
        let mut it = rates.iter();
        for op in &mut self.ops {
            if let Op::Dropout { rate } = op {
                *rate = DropoutSpec::new(*it.next().unwrap())?.rate();
            }
        }
        Ok(())
    }

    /// Writes the current parameters back into a model (rounded to f32 precision).
    pub fn to_model(&self) -> Result<ModelSpec> {
        let mut layers = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            layers.push(match op {
                Op::Dropout { rate } => LayerSpec::Dropout(DropoutSpec::new(*rate)?),
                Op::Dense { in_dim, out_dim, param } => LayerSpec::Dense(DenseSpec::new(
                    *in_dim,
                    *out_dim,
                    self.params[*param].clone(),
                    self.params[param + 1].clone(),
                )?),
                Op::Conv { g, param, padding } => LayerSpec::Conv2d(Conv2DSpec::new(
                    g.out_channels,
                    g.in_channels,
                    g.kernel_h,
                    g.kernel_w,
                    self.params[*param].clone(),
                    self.params[param + 1].clone(),
                    *padding,
                    g.stride,
                )?),
                Op::Pool { spec, .. } => LayerSpec::MaxPool2d(*spec),
                Op::Relu => LayerSpec::Relu,
                Op::Flatten => LayerSpec::Flatten,
                Op::Softmax => LayerSpec::Softmax,
            });
        }
        let t = &self.template;
        Ok(ModelSpec::new(layers, t.input_shape().to_vec(), t.task(), t.tau(), t.metadata.clone())?
            .with_standardization(t.standardization().cloned()))
    }

    fn ends_in_softmax(&self) -> bool {
        matches!(self.ops.last(), Some(Op::Softmax))
    }

    /// Forward of `n` examples up to (not including) a trailing softmax.
    /// With `rng`, dropout samples masks; without, it scales by the keep rate.
    fn forward(&self, x: &[f64], n: usize, mut rng: Option<&mut ChaCha8Rng>, caches: Option<&mut Vec<Cache>>) -> Vec<f64> {
        let mut want = caches;
        let mut cur = x.to_vec();
        for op in &self.ops {
            let cache = match op {
                Op::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) => {
                        let mut mask = vec![0.0; cur.len()];
                        sample_mask(1.0 - rate, r, &mut mask);
                        cur.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        Cache::Mask(mask)
                    }
                    None => {
                        let keep = 1.0 - rate;
                        cur.iter_mut().for_each(|v| *v *= keep);
                        Cache::None
                    }
                },
                Op::Dense { in_dim, out_dim, param } => {
                    let out = affine(&cur, n, *in_dim, *out_dim, &self.params[*param], &self.params[param + 1]);
                    Cache::Input(std::mem::replace(&mut cur, out))
                }
                Op::Conv { g, param, .. } => {
                    let out = conv_batch(g, &cur, n, &self.params[*param], Some(&self.params[param + 1]));
                    Cache::Input(std::mem::replace(&mut cur, out))
                }
                Op::Pool { spec, in_shape } => {
                    let mut shape = vec![n];
                    shape.extend_from_slice(in_shape);
                    let len = cur.len();
                    let t = Tensor::from_parts(shape, std::mem::take(&mut cur));
                    let (out, arg) = maxpool2d_forward_with_argmax(&t, spec).expect("shape checked at build");
                    cur = out.into_data();
                    Cache::Argmax(arg, len)
                }
                Op::Relu => {
                    let input = if want.is_some() { cur.clone() } else { Vec::new() };
                    cur.iter_mut().for_each(|v| *v = v.max(0.0));
                    Cache::Input(input)
                }
                Op::Flatten => Cache::None,
                Op::Softmax => break,
            };
            if let Some(c) = want.as_deref_mut() {
                c.push(cache);
            }
        }
        cur
    }

    fn backward(&self, caches: Vec<Cache>, n: usize, mut grad: Vec<f64>) -> Gradients {
        let mut pgrads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let n_ops = caches.len();
        for (op, cache) in self.ops[..n_ops].iter().zip(caches).rev() {
            grad = match (op, cache) {
                (Op::Dropout { .. }, Cache::Mask(mask)) => {
                    grad.iter_mut().zip(&mask).for_each(|(g, m)| *g *= m);
                    grad
                }
                (Op::Dense { in_dim, out_dim, param }, Cache::Input(x)) => {
                    let g = dense_backward(&x, n, *in_dim, *out_dim, &self.params[*param], &grad);
                    pgrads[*param] = g.weights;
                    pgrads[param + 1] = g.bias;
                    g.input
                }
                (Op::Conv { g: geom, param, .. }, Cache::Input(x)) => {
                    let g = conv2d_backward(geom, &x, n, &self.params[*param], &grad);
                    pgrads[*param] = g.kernel;
                    pgrads[param + 1] = g.bias;
                    g.input
                }
                (Op::Pool { .. }, Cache::Argmax(arg, len)) => maxpool2d_backward(&arg, len, &grad),
                (Op::Relu, Cache::Input(x)) => {
                    grad.iter_mut().zip(&x).for_each(|(g, v)| {
                        if *v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    grad
                }
                (Op::Dropout { rate }, Cache::None) => grad.into_iter().map(|g| g * (1.0 - rate)).collect(),
                (Op::Flatten, _) => grad,
                _ => unreachable!("cache matches op"),
            };
        }
        Gradients { params: pgrads, input: grad }
    }

    fn check_loss(&self, loss: Loss, targets: &Targets, n: usize) -> Result<()> {
        if targets.len() != n {
            return Err(Error::Data(format!("{} inputs but {} targets", n, targets.len())));
        }
        match (loss, targets) {
            (Loss::Mse, Targets::Regression(_)) if !self.ends_in_softmax() => Ok(()),
            (Loss::CategoricalNll, Targets::Classification { .. }) if self.ends_in_softmax() => Ok(()),
            _ => Err(Error::Config(format!("loss {loss:?} does not fit this model and target kind"))),
        }
    }

    /// Mean loss of the outputs and its gradient with respect to them.
    fn loss(&self, out: &[f64], targets: &Targets, idx: Option<&[usize]>, loss: Loss, want_grad: bool) -> (f64, Vec<f64>) {
        let n = idx.map_or(targets.len(), |i| i.len());
        let pick = |r: usize| idx.map_or(r, |i| i[r]);
        let k = out.len() / n;
        let mut total = 0.0;
        let mut grad = if want_grad { vec![0.0; out.len()] } else { Vec::new() };
        match (loss, targets) {
            (Loss::Mse, Targets::Regression(y)) => {
                for (r, row) in out.chunks_exact(k).enumerate() {
                    let t = y[pick(r)];
                    for (j, &o) in row.iter().enumerate() {
                        total += (o - t).powi(2);
                        if want_grad {
                            grad[r * k + j] = 2.0 * (o - t) / n as f64;
                        }
                    }
                }
            }
            (Loss::CategoricalNll, Targets::Classification { labels, .. }) => {
                let mut p = vec![0.0; k];
                for (r, row) in out.chunks_exact(k).enumerate() {
                    let c = labels[pick(r)];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - row[c];
                    if want_grad {
                        p.copy_from_slice(row);
                        softmax_in_place(&mut p);
                        p[c] -= 1.0;
                        for (g, v) in grad[r * k..(r + 1) * k].iter_mut().zip(&p) {
                            *g = v / n as f64;
                        }
                    }
                }
            }
            _ => unreachable!("checked by check_loss"),
        }
        (total / n as f64, grad)
    }

    /// Mean loss and gradients on a batch. With `mask_seed`, dropout masks are
    /// drawn from a generator seeded with it; without, the deterministic
    /// (scaled) dropout forward is used.
    pub fn loss_and_gradients(&self, inputs: &Tensor, targets: &Targets, loss: Loss, mask_seed: Option<u64>) -> Result<(f64, Gradients)> {
        let n = self.batch_len(inputs)?;
        self.check_loss(loss, targets, n)?;
        let mut rng = mask_seed.map(ChaCha8Rng::seed_from_u64);
        let mut caches = Vec::new();
        let out = self.forward(inputs.data(), n, rng.as_mut(), Some(&mut caches));
        let (l, g) = self.loss(&out, targets, None, loss, true);
        Ok((l, self.backward(caches, n, g)))
    }

    /// Mean loss only, with the same mask convention as [`Self::loss_and_gradients`].
    pub fn loss_value(&self, inputs: &Tensor, targets: &Targets, loss: Loss, mask_seed: Option<u64>) -> Result<f64> {
        let n = self.batch_len(inputs)?;
        self.check_loss(loss, targets, n)?;
        let mut rng = mask_seed.map(ChaCha8Rng::seed_from_u64);
        let out = self.forward(inputs.data(), n, rng.as_mut(), None);
        Ok(self.loss(&out, targets, None, loss, false).0)
    }

    fn batch_len(&self, inputs: &Tensor) -> Result<usize> {
        if inputs.is_empty() || inputs.len() % self.input_len != 0 {
            return Err(Error::Shape(format!("input of {} values is not a batch of {}", inputs.len(), self.input_len)));
        }
        Ok(inputs.len() / self.input_len)
    }

    /// Deterministic mean loss over a whole dataset, in chunks.
    fn dataset_loss(&self, data: &Dataset, loss: Loss) -> f64 {
        const CHUNK: usize = 512;
        let q = data.feature_len();
        let mut total = 0.0;
        for start in (0..data.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            let x = &data.features()[start * q..(start + idx.len()) * q];
            let out = self.forward(x, idx.len(), None, None);
            total += self.loss(&out, data.targets(), Some(&idx), loss, false).0 * idx.len() as f64;
        }
        total / data.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Optimisers

struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl OptState {
    fn new(params: &[Vec<f64>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    fn apply(&mut self, opt: &Optimizer, lr: f64, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        self.step += 1;
        match *opt {
            Optimizer::Sgd { momentum, .. } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((w, g), m) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *m = momentum * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps, .. } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((w, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// Trains `model` on `train`, monitoring `validation`, and returns the
/// weights of the best monitored epoch.
pub fn train(model: &ModelSpec, train: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<(ModelSpec, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if train.feature_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "data features {:?} do not match model input {:?}",
            train.feature_shape(),
            model.input_shape()
        )));
    }
    let started = Instant::now();
    let mut net = Trainable::new(model)?;
    if let Some(rates) = &cfg.dropout_rates {
        net.set_dropout_rates(rates)?;
    }
    net.check_loss(cfg.loss, train.targets(), train.len())?;
    let use_val = !validation.is_empty();
    let monitor = |net: &Trainable, epoch_train: f64| if use_val { net.dataset_loss(validation, cfg.loss) } else { epoch_train };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(&net.params);
    let mut lr = cfg.optimizer.lr();
    let initial = if use_val { net.dataset_loss(validation, cfg.loss) } else { net.dataset_loss(train, cfg.loss) };
    let mut best = (f64::INFINITY, 0usize, net.params.clone());
    let mut since_best = 0usize;
    let mut since_lr = 0usize;
    let mut plateau_best = f64::INFINITY;
    let mut report = TrainReport {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        learning_rate: Vec::new(),
        initial_validation_loss: initial,
        best_epoch: 0,
        best_validation_loss: f64::INFINITY,
        epochs_run: 0,
        stopped_early: false,
        wall_clock_seconds: 0.0,
    };
    let weight_tensors: Vec<bool> = {
        let mut w = vec![false; net.params.len()];
        for op in &net.ops {
            if let Op::Dense { param, .. } | Op::Conv { param, .. } = op {
                w[*param] = true;
            }
        }
        w
    };
    let q = train.feature_len();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut xb = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            xb.clear();
            for &i in batch {
                xb.extend_from_slice(&train.features()[i * q..(i + 1) * q]);
            }
            let mut caches = Vec::with_capacity(net.ops.len());
            let out = net.forward(&xb, batch.len(), Some(&mut rng), Some(&mut caches));
            let (l, g) = net.loss(&out, train.targets(), Some(batch), cfg.loss, true);
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("non-finite training loss {l}") });
            }
            sum += l * batch.len() as f64;
            let mut grads = net.backward(caches, batch.len(), g).params;
            if cfg.weight_decay > 0.0 {
                for ((g, p), is_w) in grads.iter_mut().zip(&net.params).zip(&weight_tensors) {
                    if *is_w {
                        g.iter_mut().zip(p).for_each(|(g, w)| *g += 2.0 * cfg.weight_decay * w);
                    }
                }
            }
            opt.apply(&cfg.optimizer, lr, &mut net.params, &grads);
        }
        let train_loss = sum / train.len() as f64;
        let monitored = monitor(&net, train_loss);
        if !monitored.is_finite() || net.params.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Divergence { epoch, detail: format!("non-finite monitored loss {monitored}") });
        }
        report.train_loss.push(train_loss);
        report.validation_loss.push(monitored);
        report.learning_rate.push(lr);
        report.epochs_run = epoch + 1;
        if monitored < best.0 {
            best = (monitored, epoch, net.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(r) = cfg.lr_reduction {
            if monitored < plateau_best {
                plateau_best = monitored;
                since_lr = 0;
            } else {
                since_lr += 1;
                if since_lr >= r.patience {
                    lr *= r.factor;
                    since_lr = 0;
                }
            }
        }
        if let Some(es) = cfg.early_stopping {
            if since_best >= es.patience {
                report.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    net.params = best.2;
    report.best_epoch = best.1;
    report.best_validation_loss = best.0;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    let mut trained = net.to_model()?;
    trained.metadata.seed = cfg.seed;
    trained.metadata.config_digest = cfg.digest();
    Ok((trained, report))
}

// ---------------------------------------------------------------------------
// Hyper-parameter search

/// How validation NLL is computed during a grid search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum NllMethod {
    /// Gaussian predictive from moment propagation.
    Mp,
    /// Mixture of `samples` MC-dropout Gaussians.
    Mc { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub dropout: f64,
    pub tau: f64,
    pub validation_nll: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_dropout: f64,
    pub best_tau: f64,
    pub best_validation_nll: f64,
    pub points: Vec<GridPoint>,
    /// Model trained at the best dropout rate, carrying the best τ.
    pub best_model: ModelSpec,
    pub best_report: TrainReport,
}

/// Validation NLL (in original target units) of a trained regression model
/// for every τ in `taus`.
pub fn validation_nll(model: &ModelSpec, data: &Dataset, taus: &[f64], method: NllMethod) -> Result<Vec<f64>> {
    let y_std = data.regression_targets().ok_or_else(|| Error::Data("regression targets required".into()))?;
    let unstd = |v: f64| model.standardization().map_or(v, |s| s.invert_target(v));
    let y: Vec<f64> = y_std.iter().map(|&v| unstd(v)).collect();
    let x = data.feature_tensor();
    let n = y.len() as f64;
    match method {
        NllMethod::Mp => {
            let preds = model.predict(&x, crate::network::ForwardMode::MomentPropagation)?;
            Ok(taus
                .iter()
                .map(|&tau| {
                    preds
                        .iter()
                        .zip(&y)
                        .map(|(p, &t)| match p {
                            PredictiveDistribution::Gaussian { mean, variance, .. } => regression_nll_mp(*mean, *variance, tau, t),
                            PredictiveDistribution::Categorical { .. } => unreachable!(),
                        })
                        .sum::<f64>()
                        / n
                })
                .collect())
        }
        NllMethod::Mc { samples, seed } => {
            let batches = mc_forward_batch(model, &x, samples, seed)?;
            let mus: Vec<Vec<f64>> = batches.iter().map(|b| b.outputs().iter().map(|&v| unstd(v)).collect()).collect();
            Ok(taus
                .iter()
                .map(|&tau| mus.iter().zip(&y).map(|(m, &t)| regression_nll_mc_slice(m, tau, t)).sum::<f64>() / n)
                .collect())
        }
    }
}

/// Grid search over dropout rate and τ, minimising validation NLL.
///
/// τ does not influence training (the loss is MSE), so one model is trained
/// per dropout rate and scored for every τ. Ties go to the smaller dropout
/// rate, then the smaller τ.
pub fn grid_search_uci<F>(
    family: F,
    data: &SplitDataset,
    dropout_grid: &[f64],
    tau_grid: &[f64],
    cfg: &TrainConfig,
    method: NllMethod,
) -> Result<GridSearchResult>
where
    F: Fn(f64) -> Result<ModelSpec> + Sync,
{
    if dropout_grid.is_empty() || tau_grid.is_empty() {
        return Err(Error::InvalidArgument("empty search grid".into()));
    }
    if tau_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument("tau grid must be positive".into()));
    }
    let mut ps = dropout_grid.to_vec();
    ps.sort_by(f64::total_cmp);
    let mut taus = tau_grid.to_vec();
    taus.sort_by(f64::total_cmp);
    let runs: Vec<(ModelSpec, TrainReport, Vec<f64>)> = ps
        .par_iter()
        .map(|&p| {
            let model = family(p)?.with_standardization(data.standardization.clone());
            let (trained, report) = train(&model, &data.train, &data.validation, cfg)?;
            let nll = validation_nll(&trained, &data.validation, &taus, method)?;
            Ok((trained, report, nll))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for (i, (_, _, nll)) in runs.iter().enumerate() {
        for (j, &v) in nll.iter().enumerate() {
            points.push(GridPoint { dropout: ps[i], tau: taus[j], validation_nll: v });
            if v < best.0 {
                best = (v, i, j);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Divergence { epoch: 0, detail: "no grid point produced a finite validation NLL".into() });
    }
    let (model, report, _) = runs.into_iter().nth(best.1).unwrap();
    Ok(GridSearchResult {
        best_dropout: ps[best.1],
        best_tau: taus[best.2],
        best_validation_nll: best.0,
        points,
        best_model: model.with_tau(taus[best.2])?,
        best_report: report,
    })
}

/// Seed for the `i`-th independent run derived from a base seed.
pub fn run_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, i as u64)
}
