//! Experiment protocols shared by the command-line tool and the integration
//! tests: toy regression, UCI-style regression, out-of-distribution
//! detection, uncertainty filtering, AUC versus MC sample count, model
//! comparison and runtime benchmarks.
//!
//! Every runner returns typed results alongside an [`ExperimentReport`],
//! which holds a config echo, a JSON summary, CSV tables and timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_friedman1, gen_friedman3, gen_synthetic_images_with_noise, gen_toy_regression, grid, load_cifar10, load_cifar10_split,
    ood_partition, read_csv_regression, split, standardize, toy_function, write_regression_csv, Dataset, SplitDataset,
    TargetColumn, Targets, IMAGE_PIXEL_NOISE, TOY_RANGE,
};
use crate::error::{Error, Result};
use crate::mc::{estimate_moments, mc_forward_batch, mc_logits_batch};
use crate::metrics::{
    argmax, filter_curve, mean_and_se, median, pearson_ci, regression_nll_mc_slice, regression_nll_mp, rmse,
    roc_auc, wilson_ci, FilterRow, UncertaintyKind, UncertaintyScore,
};
use crate::network::{ModelSpec, PredictiveDistribution, Task};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::training::{grid_search_uci, train, Architecture, EarlyStopping, Loss, NllMethod, TrainConfig, TrainReport};

/// Timing repeats never go below this.
pub const MIN_TIMING_REPEATS: usize = 3;

// ---------------------------------------------------------------------------
// Reports and timing

/// Wall-clock seconds, mean ± standard error over repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub se_seconds: f64,
    pub repeats: usize,
}

/// Runs `f` at least [`MIN_TIMING_REPEATS`] times and returns the timing
/// together with the last result.
pub fn time_repeats<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Timing, T)> {
    let repeats = repeats.max(MIN_TIMING_REPEATS);
    let mut secs = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let out = f()?;
        secs.push(t0.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (mean, se) = mean_and_se(&secs);
    Ok((Timing { mean_seconds: mean, se_seconds: se, repeats }, last.unwrap()))
}

/// Self-describing result of one command.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// Effective configuration with defaults resolved.
    pub config: serde_json::Value,
    pub summary: serde_json::Value,
    pub runtimes: BTreeMap<String, Timing>,
    /// Files written by [`ExperimentReport::write`], relative to the run directory.
    pub artifacts: Vec<String>,
    #[serde(skip)]
    tables: Vec<(String, String)>,
    #[serde(skip)]
    files: Vec<(String, Vec<u8>)>,
}

impl ExperimentReport {
    pub fn new<C: Serialize>(experiment: &str, config: &C) -> Result<Self> {
        Ok(Self {
            experiment: experiment.to_string(),
            config: serde_json::to_value(config)?,
            summary: serde_json::Value::Null,
            runtimes: BTreeMap::new(),
            artifacts: Vec::new(),
            tables: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn set_summary<S: Serialize>(&mut self, summary: &S) -> Result<()> {
        self.summary = serde_json::to_value(summary)?;
        Ok(())
    }

    pub fn add_runtime(&mut self, name: &str, t: Timing) {
        self.runtimes.insert(name.to_string(), t);
    }

    /// Adds a table, stored as CSV text with a header row.
    pub fn add_table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.tables.push((name.to_string(), String::from_utf8(bytes).expect("csv output is utf-8")));
        Ok(())
    }

    /// Adds an opaque file (e.g. a model) to be written with the report.
    pub fn add_file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// CSV text of a table.
    pub fn table(&self, name: &str) -> Option<&str> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every table as `<name>.csv`, extra files, and `summary.json`.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        self.artifacts.clear();
        for (name, text) in &self.tables {
            let file = format!("{name}.csv");
            fs::write(dir.join(&file), text)?;
            self.artifacts.push(file);
        }
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
            self.artifacts.push(name.clone());
        }
        self.artifacts.push("summary.json".into());
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

fn regression_truth(data: &Dataset, s: Option<&crate::data::Standardization>) -> Result<Vec<f64>> {
    let y = data.regression_targets().ok_or_else(|| Error::Data("regression targets required".into()))?;
    Ok(y.iter().map(|&v| s.map_or(v, |s| s.invert_target(v))).collect())
}

fn labels_of(data: &Dataset) -> Result<&[usize]> {
    data.labels().ok_or_else(|| Error::Data("class labels required".into()))
}

// ---------------------------------------------------------------------------
// Data sources and training jobs

/// Where a command gets its data from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Toy {
        #[serde(default = "default_toy_n")]
        n: usize,
        #[serde(default = "default_toy_noise")]
        noise_sd: f64,
        #[serde(default = "default_toy_range")]
        x_range: (f64, f64),
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        target: TargetColumn,
    },
    Friedman1 {
        n: usize,
        #[serde(default = "default_friedman_noise")]
        noise_sd: f64,
    },
    SyntheticImages {
        n_per_class: usize,
        #[serde(default = "default_num_classes")]
        num_classes: usize,
        #[serde(default = "default_image_size")]
        size: usize,
        #[serde(default = "default_pixel_noise")]
        pixel_noise: f64,
        /// Keep only these classes, relabelled in order.
        #[serde(default)]
        ind_classes: Option<Vec<usize>>,
    },
    Cifar10 {
        path: PathBuf,
    },
}

fn default_toy_n() -> usize {
    600
}
fn default_toy_noise() -> f64 {
    0.1
}
fn default_toy_range() -> (f64, f64) {
    TOY_RANGE
}
fn default_friedman_noise() -> f64 {
    1.0
}
fn default_num_classes() -> usize {
    10
}
fn default_image_size() -> usize {
    16
}
fn default_pixel_noise() -> f64 {
    IMAGE_PIXEL_NOISE
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Toy { n, noise_sd, x_range } => gen_toy_regression(*n, *x_range, *noise_sd, seed),
            DataSource::Csv { path, target } => read_csv_regression(path, target),
            DataSource::Friedman1 { n, noise_sd } => gen_friedman1(*n, *noise_sd, seed),
            DataSource::SyntheticImages { n_per_class, num_classes, size, pixel_noise, ind_classes } => {
                let d = gen_synthetic_images_with_noise(*n_per_class, *num_classes, *size, *pixel_noise, seed)?;
                match ind_classes {
                    Some(ind) => Ok(ood_partition(&d, ind)?.0),
                    None => Ok(d),
                }
            }
            DataSource::Cifar10 { path } => load_cifar10(path),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            DataSource::SyntheticImages { .. } | DataSource::Cifar10 { .. } => Task::Classification,
            _ => Task::Regression,
        }
    }
}

/// Configuration of the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    #[serde(default = "default_job_name")]
    pub name: String,
    pub data: DataSource,
    pub architecture: Architecture,
    /// Train / validation / test fractions.
    #[serde(default = "default_job_fractions")]
    pub fractions: (f64, f64, f64),
    /// Observation-noise precision in target units. When absent it is set to
    /// the inverse validation mean squared error of the trained model.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Seed of data generation and splitting.
    #[serde(default)]
    pub seed: u64,
}

fn default_job_name() -> String {
    "model".into()
}
fn default_job_fractions() -> (f64, f64, f64) {
    (0.8, 0.2, 0.0)
}

impl TrainJob {
    pub fn from_path(path: &Path) -> Result<Self> {
        load_config(path)
    }
}

/// Reads a configuration file: JSON for `.json`, TOML otherwise.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => toml::from_str(&text).map_err(|e| e.to_string()),
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Outcome of [`run_train_job`].
#[derive(Debug, Clone)]
pub struct TrainJobResult {
    pub model: ModelSpec,
    pub report: TrainReport,
    pub splits: SplitDataset,
}

#[derive(Debug, Clone, Serialize)]
struct TrainSummary {
    name: String,
    train_examples: usize,
    validation_examples: usize,
    test_examples: usize,
    best_epoch: usize,
    best_validation_loss: f64,
    epochs_run: usize,
    stopped_early: bool,
    wall_clock_seconds: f64,
    tau: Option<f64>,
    test_rmse: Option<f64>,
    test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    validation_loss: f64,
    learning_rate: f64,
}

/// Trains a model as described by a [`TrainJob`]. Regression data is
/// standardised with training statistics stored in the model.
pub fn run_train_job(job: &TrainJob) -> Result<(TrainJobResult, ExperimentReport)> {
    job.train.validate()?;
    let task = job.data.task();
    let data = job.data.load(job.seed)?;
    let mut splits = split(&data, job.fractions, derive_seed(job.seed, 1))?;
    if task == Task::Regression {
        splits = standardize(splits)?;
    }
    let outputs = data.num_classes().unwrap_or(1);
    let tau0 = (task == Task::Regression).then_some(job.tau.unwrap_or(1.0));
    let model = job
        .architecture
        .build(data.feature_shape(), task, outputs, tau0, job.train.seed)?
        .with_standardization(splits.standardization.clone());
    let (mut model, report) = train(&model, &splits.train, &splits.validation, &job.train)?;
    model.metadata.name = job.name.clone();
    if task == Task::Regression && job.tau.is_none() {
        let eval = if splits.validation.is_empty() { &splits.train } else { &splits.validation };
        let pred = regression_means(&model, &eval.feature_tensor())?;
        let truth = regression_truth(eval, model.standardization())?;
        let mse = rmse(&pred, &truth).powi(2);
        model = model.with_tau(1.0 / mse.max(1e-12))?;
    }
    let (test_rmse, test_accuracy) = if splits.test.is_empty() {
        (None, None)
    } else {
        match task {
            Task::Regression => {
                let pred = regression_means(&model, &splits.test.feature_tensor())?;
                (Some(rmse(&pred, &regression_truth(&splits.test, model.standardization())?)), None)
            }
            Task::Classification => {
                let probs = class_probs(&model, &splits.test.feature_tensor())?;
                (None, Some(accuracy(&probs, labels_of(&splits.test)?)))
            }
        }
    };
    let mut rep = ExperimentReport::new("train", job)?;
    rep.set_summary(&TrainSummary {
        name: job.name.clone(),
        train_examples: splits.train.len(),
        validation_examples: splits.validation.len(),
        test_examples: splits.test.len(),
        best_epoch: report.best_epoch,
        best_validation_loss: report.best_validation_loss,
        epochs_run: report.epochs_run,
        stopped_early: report.stopped_early,
        wall_clock_seconds: report.wall_clock_seconds,
        tau: model.tau(),
        test_rmse,
        test_accuracy,
    })?;
    let rows: Vec<EpochRow> = (0..report.epochs_run)
        .map(|e| EpochRow {
            epoch: e,
            train_loss: report.train_loss[e],
            validation_loss: report.validation_loss[e],
            learning_rate: report.learning_rate[e],
        })
        .collect();
    rep.add_table("epochs", &rows)?;
    Ok((TrainJobResult { model, report, splits }, rep))
}

/// Deterministic regression means in target units.
fn regression_means(model: &ModelSpec, x: &Tensor) -> Result<Vec<f64>> {
    let preds = model.predict(x, crate::network::ForwardMode::Deterministic)?;
    Ok(preds
        .iter()
        .map(|p| match p {
            PredictiveDistribution::Gaussian { mean, .. } => *mean,
            PredictiveDistribution::Categorical { .. } => f64::NAN,
        })
        .collect())
}

fn class_probs(model: &ModelSpec, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let k: usize = model.output_shape().iter().product();
    Ok(model.forward_deterministic(x)?.data().chunks_exact(k).map(<[f64]>::to_vec).collect())
}

fn mp_probs(model: &ModelSpec, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let k: usize = model.output_shape().iter().product();
    let out = model.forward_mp(x)?;
    let p = out.probabilities.ok_or_else(|| Error::IncompatibleMode {
        mode: "moment-propagation",
        reason: "the model has no softmax output".into(),
    })?;
    Ok(p.data().chunks_exact(k).map(<[f64]>::to_vec).collect())
}

fn mc_probs(model: &ModelSpec, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(mc_forward_batch(model, x, samples, seed)?.iter().map(|b| b.mean()).collect())
}

fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

fn class_nlls(probs: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    probs.iter().zip(labels).map(|(p, &y)| -p[y].max(1e-300).ln()).collect()
}

fn mean_probs(members: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = members.len() as f64;
    let mut acc = members[0].clone();
    for other in &members[1..] {
        for (a, b) in acc.iter_mut().zip(other) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    acc.iter_mut().for_each(|p| p.iter_mut().for_each(|x| *x /= m));
    acc
}

// ---------------------------------------------------------------------------
// compare

/// One output component of one example.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub example: usize,
    pub output: usize,
    /// MP expectation and variance (pre-softmax for classifiers, target units for regression).
    pub mp_mean: f64,
    pub mp_var: f64,
    pub mc_mean: f64,
    pub mc_var: f64,
    /// Standard error of `mc_mean`.
    pub mc_se: f64,
    /// `|mp_mean − mc_mean| / mc_se` (0 when both agree exactly).
    pub z: f64,
}

/// Expected class probabilities of one example and class.
#[derive(Debug, Clone, Serialize)]
pub struct CompareProbRow {
    pub example: usize,
    pub class: usize,
    pub mp_prob: f64,
    pub mc_prob: f64,
    pub nn_prob: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub examples: usize,
    pub samples: usize,
    pub max_abs_mean_diff: f64,
    pub fraction_within_3se: f64,
    /// Median of `|sd_MP / sd_MC − 1|` over components with positive MC variance.
    pub median_sd_rel_diff: f64,
    pub max_abs_prob_diff: Option<f64>,
    pub mp_seconds: f64,
    pub mc_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub rows: Vec<CompareRow>,
    pub probs: Vec<CompareProbRow>,
    pub summary: CompareSummary,
}

/// Compares MP moments with MC-dropout estimates for every example of a
/// batch of (already standardised) inputs.
pub fn compare(model: &ModelSpec, inputs: &Tensor, samples: usize, seed: u64) -> Result<CompareResult> {
    if samples < 2 {
        return Err(Error::IncompatibleMode { mode: "mc-sample", reason: "comparison needs at least 2 samples".into() });
    }
    let n = inputs.shape()[0];
    let t0 = Instant::now();
    let mp = model.forward_mp(inputs)?;
    let mp_seconds = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let batches = mc_logits_batch(model, inputs, samples, seed)?;
    let mc_seconds = t0.elapsed().as_secs_f64();
    let (scale, shift) = match (model.task(), model.standardization()) {
        (Task::Regression, Some(s)) => (s.target_std, s.target_mean),
        _ => (1.0, 0.0),
    };
    let width = mp.moments.len() / n;
    let mut rows = Vec::with_capacity(n * width);
    for (i, b) in batches.iter().enumerate() {
        let est = estimate_moments(b)?;
        for j in 0..width {
            let e = mp.moments.expectation()[i * width + j];
            let v = mp.moments.variance()[i * width + j];
            let (mp_mean, mp_var) = (shift + scale * e, v * scale * scale);
            let (mc_mean, mc_var, mc_se) =
                (shift + scale * est.mean[j], est.variance[j] * scale * scale, est.standard_error_mean[j] * scale);
            let diff = (mp_mean - mc_mean).abs();
            let z = if diff == 0.0 { 0.0 } else { diff / mc_se };
            rows.push(CompareRow { example: i, output: j, mp_mean, mp_var, mc_mean, mc_var, mc_se, z });
        }
    }
    let mut probs = Vec::new();
    let mut max_abs_prob_diff = None;
    if let Some(p) = &mp.probabilities {
        let k = width;
        let nn = model.forward_deterministic(inputs)?;
        let mut worst = 0.0f64;
        for (i, b) in mc_forward_batch(model, inputs, samples, seed)?.iter().enumerate() {
            let mc = b.mean();
            for c in 0..k {
                let mp_prob = p.data()[i * k + c];
                worst = worst.max((mp_prob - mc[c]).abs());
                probs.push(CompareProbRow { example: i, class: c, mp_prob, mc_prob: mc[c], nn_prob: nn.data()[i * k + c] });
            }
        }
        max_abs_prob_diff = Some(worst);
    }
    let within = rows.iter().filter(|r| r.z <= 3.0).count();
    let sd_rel: Vec<f64> =
        rows.iter().filter(|r| r.mc_var > 0.0).map(|r| ((r.mp_var / r.mc_var).sqrt() - 1.0).abs()).collect();
    let summary = CompareSummary {
        examples: n,
        samples,
        max_abs_mean_diff: rows.iter().map(|r| (r.mp_mean - r.mc_mean).abs()).fold(0.0, f64::max),
        fraction_within_3se: within as f64 / rows.len().max(1) as f64,
        median_sd_rel_diff: if sd_rel.is_empty() { 0.0 } else { median(&sd_rel) },
        max_abs_prob_diff,
        mp_seconds,
        mc_seconds,
    };
    Ok(CompareResult { rows, probs, summary })
}

/// `compare` wrapped in a report with `moments` and `probabilities` tables.
pub fn compare_report<C: Serialize>(
    model: &ModelSpec,
    inputs: &Tensor,
    samples: usize,
    seed: u64,
    config: &C,
) -> Result<(CompareResult, ExperimentReport)> {
    let res = compare(model, inputs, samples, seed)?;
    let mut rep = ExperimentReport::new("compare", config)?;
    rep.set_summary(&res.summary)?;
    rep.add_table("moments", &res.rows)?;
    if !res.probs.is_empty() {
        rep.add_table("probabilities", &res.probs)?;
    }
    Ok((res, rep))
}

// ---------------------------------------------------------------------------
// Toy regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_train: usize,
    pub noise_sd: f64,
    pub x_range: (f64, f64),
    pub validation_fraction: f64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub train: TrainConfig,
    /// Test points inside the training range.
    pub grid_points: usize,
    /// Plotting grid, which extends beyond the training range.
    pub extrapolation_range: (f64, f64),
    pub extrapolation_points: usize,
    pub mc_samples: usize,
    pub timing_repeats: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_train: 600,
            noise_sd: 0.1,
            x_range: TOY_RANGE,
            validation_fraction: 0.2,
            hidden: vec![256, 256, 256],
            dropout: 0.3,
            train: TrainConfig {
                epochs: 2000,
                batch_size: 32,
                lr_reduction: None,
                early_stopping: None,
                ..TrainConfig::default()
            },
            grid_points: 200,
            extrapolation_range: (-10.0, 26.0),
            extrapolation_points: 181,
            mc_samples: 10_000,
            timing_repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyPoint {
    pub x: f64,
    pub inside: bool,
    pub truth: f64,
    pub mp_mean: f64,
    /// Model standard deviation (without observation noise).
    pub mp_sd: f64,
    pub mc_mean: f64,
    pub mc_sd: f64,
    pub mc_se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToySummary {
    pub inside_points: usize,
    pub fraction_within_3se: f64,
    pub median_sd_rel_diff: f64,
    pub median_sd_ratio: f64,
    pub validation_rmse: f64,
    pub noise_sd: f64,
    pub tau: f64,
    pub epochs_run: usize,
    pub train_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ToyResult {
    pub model: ModelSpec,
    pub report: TrainReport,
    pub points: Vec<ToyPoint>,
    pub summary: ToySummary,
}

/// Trains the toy MLP and compares MP with MC on an inside grid and an
/// extrapolation grid.
pub fn run_toy(cfg: &ToyConfig) -> Result<(ToyResult, ExperimentReport)> {
    if cfg.grid_points < 2 || cfg.mc_samples < 2 || !(cfg.noise_sd > 0.0) {
        return Err(Error::Config("toy: grid_points and mc_samples must be ≥ 2 and noise_sd > 0".into()));
    }
    let data = gen_toy_regression(cfg.n_train, cfg.x_range, cfg.noise_sd, cfg.seed)?;
    let splits = standardize(split(&data, (1.0 - cfg.validation_fraction, cfg.validation_fraction, 0.0), derive_seed(cfg.seed, 1))?)?;
    let tau = 1.0 / (cfg.noise_sd * cfg.noise_sd);
    let arch = Architecture::Mlp { hidden: cfg.hidden.clone(), dropout: cfg.dropout };
    let model = arch
        .build(&[1], Task::Regression, 1, Some(tau), cfg.train.seed)?
        .with_standardization(splits.standardization.clone());
    let (mut model, report) = train(&model, &splits.train, &splits.validation, &cfg.train)?;
    model.metadata.name = "toy".into();

    let val = if splits.validation.is_empty() { &splits.train } else { &splits.validation };
    let val_pred = regression_means(&model, &val.feature_tensor())?;
    let validation_rmse = rmse(&val_pred, &regression_truth(val, model.standardization())?);

    let inside = grid(cfg.grid_points, cfg.x_range.0, cfg.x_range.1);
    let outside = grid(cfg.extrapolation_points.max(2), cfg.extrapolation_range.0, cfg.extrapolation_range.1);
    let xs: Vec<(f64, bool)> = inside.iter().map(|&x| (x, true)).chain(outside.iter().map(|&x| (x, false))).collect();
    let s = model.standardization().cloned().expect("toy model is standardised");
    let mut raw: Vec<f64> = xs.iter().map(|p| p.0).collect();
    s.apply_features(&mut raw);
    let x = Tensor::new(vec![xs.len(), 1], raw)?;
    let (t_mp, mp) = time_repeats(cfg.timing_repeats, || model.forward_mp(&x))?;
    let (t_mc, batches) = time_repeats(cfg.timing_repeats, || mc_forward_batch(&model, &x, cfg.mc_samples, derive_seed(cfg.seed, 2)))?;
    let (a, b) = (s.target_mean, s.target_std);
    let mut points = Vec::with_capacity(xs.len());
    for (i, (&(xv, inside), batch)) in xs.iter().zip(&batches).enumerate() {
        let est = estimate_moments(batch)?;
        let mp_mean = a + b * mp.moments.expectation()[i];
        let mc_mean = a + b * est.mean[0];
        let mc_se = b * est.standard_error_mean[0];
        let diff = (mp_mean - mc_mean).abs();
        points.push(ToyPoint {
            x: xv,
            inside,
            truth: toy_function(xv),
            mp_mean,
            mp_sd: b * mp.moments.variance()[i].sqrt(),
            mc_mean,
            mc_sd: b * est.variance[0].sqrt(),
            mc_se,
            z: if diff == 0.0 { 0.0 } else { diff / mc_se },
        });
    }
    let ins: Vec<&ToyPoint> = points.iter().filter(|p| p.inside).collect();
    let ratios: Vec<f64> = ins.iter().map(|p| p.mp_sd / p.mc_sd).collect();
    let summary = ToySummary {
        inside_points: ins.len(),
        fraction_within_3se: ins.iter().filter(|p| p.z <= 3.0).count() as f64 / ins.len() as f64,
        median_sd_rel_diff: median(&ratios.iter().map(|r| (r - 1.0).abs()).collect::<Vec<_>>()),
        median_sd_ratio: median(&ratios),
        validation_rmse,
        noise_sd: cfg.noise_sd,
        tau,
        epochs_run: report.epochs_run,
        train_seconds: report.wall_clock_seconds,
    };
    let mut rep = ExperimentReport::new("toy", cfg)?;
    rep.set_summary(&summary)?;
    rep.add_runtime("mp_forward", t_mp);
    rep.add_runtime("mc_forward", t_mc);
    rep.add_table("curves", &points)?;
    let train_rows: Vec<(f64, f64)> = (0..data.len()).map(|i| (data.row(i)[0], data.regression_targets().unwrap()[i])).collect();
    rep.add_table("training_data", &train_rows.iter().map(|&(x, y)| XyRow { x, y }).collect::<Vec<_>>())?;
    rep.add_file("model.mpmdl", crate::format::encode_model(&model)?);
    Ok((ToyResult { model, report, points, summary }, rep))
}

#[derive(Debug, Clone, Serialize)]
struct XyRow {
    x: f64,
    y: f64,
}

// ---------------------------------------------------------------------------
// UCI-style regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UciDataset {
    #[serde(default)]
    pub name: Option<String>,
    pub path: PathBuf,
    #[serde(default)]
    pub target: TargetColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UciConfig {
    pub datasets: Vec<UciDataset>,
    /// Generate Friedman #1 and #3 stand-in CSVs (into `synthetic_dir`) and
    /// append them to `datasets`.
    pub synthetic: bool,
    pub synthetic_dir: Option<PathBuf>,
    pub synthetic_rows: usize,
    pub splits: usize,
    pub fractions: (f64, f64, f64),
    pub hidden: Vec<usize>,
    pub dropout_grid: Vec<f64>,
    /// Explicit τ grid (target units). When absent, `1/(f · var(y_train))`
    /// for every `f` in `tau_variance_fractions`.
    pub tau_grid: Option<Vec<f64>>,
    pub tau_variance_fractions: Vec<f64>,
    pub train: TrainConfig,
    pub grid_method: NllMethod,
    pub mc_samples: usize,
    pub timing_repeats: usize,
    pub seed: u64,
}

impl Default for UciConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            synthetic: false,
            synthetic_dir: None,
            synthetic_rows: 1000,
            splits: 5,
            fractions: (0.8, 0.1, 0.1),
            hidden: vec![50],
            dropout_grid: vec![0.005, 0.01, 0.05, 0.1],
            tau_grid: None,
            tau_variance_fractions: vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
            train: TrainConfig {
                epochs: 200,
                batch_size: 32,
                early_stopping: Some(EarlyStopping { patience: 20 }),
                ..TrainConfig::default()
            },
            grid_method: NllMethod::Mp,
            mc_samples: 1000,
            timing_repeats: 3,
            seed: 0,
        }
    }
}

/// One dataset and split.
#[derive(Debug, Clone, Serialize)]
pub struct UciSplitRow {
    pub dataset: String,
    pub split: usize,
    pub n: usize,
    pub q: usize,
    pub dropout: f64,
    pub tau: f64,
    pub rmse_mc: f64,
    pub rmse_mp: f64,
    pub nll_mc: f64,
    pub nll_mc_se: f64,
    pub nll_mp: f64,
    pub nll_mp_se: f64,
    pub rt_mc: f64,
    pub rt_mp: f64,
}

/// One dataset, averaged over splits (mean and standard error).
#[derive(Debug, Clone, Serialize)]
pub struct UciTableRow {
    pub dataset: String,
    pub n: usize,
    pub q: usize,
    pub rmse_mc: f64,
    pub rmse_mc_se: f64,
    pub rmse_mp: f64,
    pub rmse_mp_se: f64,
    pub nll_mc: f64,
    pub nll_mc_se: f64,
    pub nll_mp: f64,
    pub nll_mp_se: f64,
    pub rt_mc: f64,
    pub rt_mc_se: f64,
    pub rt_mp: f64,
    pub rt_mp_se: f64,
}

#[derive(Debug, Clone)]
pub struct UciResult {
    pub splits: Vec<UciSplitRow>,
    pub table: Vec<UciTableRow>,
}

/// Writes the Friedman stand-in CSVs into `dir` and returns their specs.
pub fn write_synthetic_uci(dir: &Path, rows: usize, seed: u64) -> Result<Vec<UciDataset>> {
    fs::create_dir_all(dir)?;
    let sets = [
        ("friedman1", gen_friedman1(rows, 1.0, derive_seed(seed, 101))?),
        ("friedman3", gen_friedman3(rows, 0.1, derive_seed(seed, 103))?),
    ];
    sets.into_iter()
        .map(|(name, d)| {
            let path = dir.join(format!("{name}.csv"));
            write_regression_csv(&path, &d)?;
            Ok(UciDataset { name: Some(name.into()), path, target: TargetColumn::Last })
        })
        .collect()
}

/// Grid-searches dropout and τ on each split, then scores MC and MP on the
/// test split of the same trained model.
pub fn run_uci(cfg: &UciConfig) -> Result<(UciResult, ExperimentReport)> {
    let mut cfg = cfg.clone();
    if cfg.synthetic {
        let dir = cfg.synthetic_dir.clone().unwrap_or_else(|| std::env::temp_dir().join("momentprop-uci"));
        let extra = write_synthetic_uci(&dir, cfg.synthetic_rows, cfg.seed)?;
        cfg.datasets.extend(extra);
        cfg.synthetic_dir = Some(dir);
    }
    if cfg.datasets.is_empty() {
        return Err(Error::Data("uci: no datasets given (add [[datasets]] entries or set synthetic = true)".into()));
    }
    if cfg.splits == 0 || cfg.mc_samples < 1 {
        return Err(Error::Config("uci: splits and mc_samples must be at least 1".into()));
    }
    cfg.train.validate()?;
    let mut split_rows = Vec::new();
    let mut table = Vec::new();
    for (di, ds) in cfg.datasets.iter().enumerate() {
        let name = ds.name.clone().unwrap_or_else(|| {
            ds.path.file_stem().map_or_else(|| format!("dataset{di}"), |s| s.to_string_lossy().into_owned())
        });
        let data = read_csv_regression(&ds.path, &ds.target)?;
        let (n, q) = (data.len(), data.feature_len());
        for sp in 0..cfg.splits {
            let split_seed = derive_seed(derive_seed(cfg.seed, di as u64), sp as u64);
            let splits = standardize(split(&data, cfg.fractions, split_seed)?)?;
            if splits.test.is_empty() || splits.validation.is_empty() {
                return Err(Error::Data(format!("{name}: too few rows for a train/validation/test split")));
            }
            let taus = match &cfg.tau_grid {
                Some(t) => t.clone(),
                None => {
                    let y = regression_truth(&splits.train, splits.standardization.as_ref())?;
                    let (m, _) = mean_and_se(&y);
                    let var = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).max(1e-12);
                    cfg.tau_variance_fractions.iter().map(|f| 1.0 / (f * var)).collect()
                }
            };
            let mut tc = cfg.train.clone();
            tc.seed = derive_seed(split_seed, 7);
            let hidden = cfg.hidden.clone();
            let family = |p: f64| {
                Architecture::Mlp { hidden: hidden.clone(), dropout: p }.build(&[q], Task::Regression, 1, Some(1.0), tc.seed)
            };
            let gs = grid_search_uci(family, &splits, &cfg.dropout_grid, &taus, &tc, cfg.grid_method)?;
            let model = gs.best_model;
            let tau = model.tau().unwrap();
            let x = splits.test.feature_tensor();
            let y = regression_truth(&splits.test, model.standardization())?;
            let s = model.standardization().cloned().unwrap();
            let (t_mp, mp) = time_repeats(cfg.timing_repeats, || model.forward_mp(&x))?;
            let mc_seed = derive_seed(split_seed, 11);
            let (t_mc, mc) = time_repeats(cfg.timing_repeats, || mc_forward_batch(&model, &x, cfg.mc_samples, mc_seed))?;
            let mp_mean: Vec<f64> = mp.moments.expectation().iter().map(|&e| s.invert_target(e)).collect();
            let mp_var: Vec<f64> = mp.moments.variance().iter().map(|&v| v * s.target_std * s.target_std).collect();
            let mc_mus: Vec<Vec<f64>> = mc.iter().map(|b| b.outputs().iter().map(|&v| s.invert_target(v)).collect()).collect();
            let mc_mean: Vec<f64> = mc_mus.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect();
            let nll_mp: Vec<f64> = (0..y.len()).map(|i| regression_nll_mp(mp_mean[i], mp_var[i], tau, y[i])).collect();
            let nll_mc: Vec<f64> = (0..y.len()).map(|i| regression_nll_mc_slice(&mc_mus[i], tau, y[i])).collect();
            let (nll_mp, nll_mp_se) = mean_and_se(&nll_mp);
            let (nll_mc, nll_mc_se) = mean_and_se(&nll_mc);
            split_rows.push(UciSplitRow {
                dataset: name.clone(),
                split: sp,
                n,
                q,
                dropout: gs.best_dropout,
                tau,
                rmse_mc: rmse(&mc_mean, &y),
                rmse_mp: rmse(&mp_mean, &y),
                nll_mc,
                nll_mc_se,
                nll_mp,
                nll_mp_se,
                rt_mc: t_mc.mean_seconds,
                rt_mp: t_mp.mean_seconds,
            });
        }
        let rows: Vec<&UciSplitRow> = split_rows.iter().filter(|r| r.dataset == name).collect();
        let col = |f: fn(&UciSplitRow) -> f64| mean_and_se(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (rmse_mc, rmse_mc_se) = col(|r| r.rmse_mc);
        let (rmse_mp, rmse_mp_se) = col(|r| r.rmse_mp);
        let (nll_mc, nll_mc_se) = col(|r| r.nll_mc);
        let (nll_mp, nll_mp_se) = col(|r| r.nll_mp);
        let (rt_mc, rt_mc_se) = col(|r| r.rt_mc);
        let (rt_mp, rt_mp_se) = col(|r| r.rt_mp);
        table.push(UciTableRow {
            dataset: name,
            n,
            q,
            rmse_mc,
            rmse_mc_se,
            rmse_mp,
            rmse_mp_se,
            nll_mc,
            nll_mc_se,
            nll_mp,
            nll_mp_se,
            rt_mc,
            rt_mc_se,
            rt_mp,
            rt_mp_se,
        });
    }
    let mut rep = ExperimentReport::new("uci", &cfg)?;
    rep.set_summary(&table)?;
    rep.add_table("table", &table)?;
    rep.add_table("splits", &split_rows)?;
    Ok((UciResult { splits: split_rows, table }, rep))
}

// ---------------------------------------------------------------------------
// Out-of-distribution detection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub num_classes: usize,
    pub ind_classes: Vec<usize>,
    pub image_size: usize,
    /// Pixel noise standard deviation of the synthetic images.
    pub pixel_noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub validation_fraction: f64,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub mc_samples: usize,
    pub ensemble_sizes: Vec<usize>,
    pub seeds: usize,
    pub uncertainty: UncertaintyKind,
    /// Directory with CIFAR-10 binary batches; replaces the synthetic images.
    pub cifar_dir: Option<PathBuf>,
    /// Must be set to run on CIFAR-10, which takes hours on a CPU.
    pub long_running: bool,
    pub timing_repeats: usize,
    pub seed: u64,
}

/// Pixel noise of the default OOD images: noisy enough that IND test
/// accuracy stays below 1, so that predictive entropies are informative.
pub const OOD_PIXEL_NOISE: f64 = 0.6;

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            ind_classes: vec![0, 2, 4, 6, 8],
            image_size: 16,
            pixel_noise: OOD_PIXEL_NOISE,
            train_per_class: 300,
            test_per_class: 200,
            validation_fraction: 0.2,
            architecture: Architecture::Cnn { channels: vec![16, 32, 64], dense: vec![128, 128], dropout: 0.3, kernel: 3 },
            train: TrainConfig { epochs: 30, batch_size: 32, loss: Loss::CategoricalNll, ..TrainConfig::default() },
            mc_samples: 50,
            ensemble_sizes: vec![1, 5],
            seeds: 5,
            uncertainty: UncertaintyKind::Entropy,
            cifar_dir: None,
            long_running: false,
            timing_repeats: 3,
            seed: 0,
        }
    }
}

/// Data of one OOD run.
#[derive(Debug, Clone)]
pub struct OodSetup {
    pub train: Dataset,
    pub validation: Dataset,
    /// Test images of the IND classes (relabelled).
    pub ind_test: Dataset,
    /// Test images of the remaining classes (original labels).
    pub ood_test: Dataset,
}

impl OodSetup {
    /// IND test images followed by OOD test images.
    pub fn test_inputs(&self) -> Result<Tensor> {
        let mut data = self.ind_test.features().to_vec();
        data.extend_from_slice(self.ood_test.features());
        let mut shape = vec![self.ind_test.len() + self.ood_test.len()];
        shape.extend_from_slice(self.ind_test.feature_shape());
        Tensor::new(shape, data)
    }

    /// `true` for OOD rows of [`OodSetup::test_inputs`].
    pub fn is_ood(&self) -> Vec<bool> {
        let mut v = vec![false; self.ind_test.len()];
        v.resize(self.ind_test.len() + self.ood_test.len(), true);
        v
    }
}

/// Builds the IND training/validation split and the IND/OOD test sets for
/// one seed.
pub fn ood_data(cfg: &OodConfig, seed: u64) -> Result<OodSetup> {
    let (train_all, test_all) = match &cfg.cifar_dir {
        Some(dir) => {
            if !cfg.long_running {
                return Err(Error::Config("the CIFAR-10 experiment is long-running; set long_running = true to run it".into()));
            }
            load_cifar10_split(dir)?
        }
        None => (
            gen_synthetic_images_with_noise(cfg.train_per_class, cfg.num_classes, cfg.image_size, cfg.pixel_noise, derive_seed(seed, 1))?,
            gen_synthetic_images_with_noise(cfg.test_per_class, cfg.num_classes, cfg.image_size, cfg.pixel_noise, derive_seed(seed, 2))?,
        ),
    };
    let (ind_train, _) = ood_partition(&train_all, &cfg.ind_classes)?;
    let (ind_test, ood_test) = ood_partition(&test_all, &cfg.ind_classes)?;
    let s = split(&ind_train, (1.0 - cfg.validation_fraction, cfg.validation_fraction, 0.0), derive_seed(seed, 3))?;
    Ok(OodSetup { train: s.train, validation: s.validation, ind_test, ood_test })
}

/// Trains `count` ensemble members with independent initialisations.
pub fn ood_train_members(cfg: &OodConfig, setup: &OodSetup, seed: u64, count: usize) -> Result<Vec<(ModelSpec, TrainReport)>> {
    let k = cfg.ind_classes.len();
    (0..count)
        .into_par_iter()
        .map(|m| {
            let member_seed = derive_seed(seed, 100 + m as u64);
            let model = cfg.architecture.build(setup.train.feature_shape(), Task::Classification, k, None, member_seed)?;
            let mut tc = cfg.train.clone();
            tc.seed = member_seed;
            let (mut trained, report) = train(&model, &setup.train, &setup.validation, &tc)?;
            trained.metadata.name = format!("ood-member{m}");
            Ok((trained, report))
        })
        .collect()
}

/// Class probabilities of every test row under the three methods.
#[derive(Debug, Clone)]
pub struct MemberProbs {
    pub nn: Vec<Vec<f64>>,
    pub mc: Vec<Vec<f64>>,
    pub mp: Vec<Vec<f64>>,
}

pub fn member_probs(model: &ModelSpec, x: &Tensor, mc_samples: usize, seed: u64) -> Result<MemberProbs> {
    Ok(MemberProbs { nn: class_probs(model, x)?, mc: mc_probs(model, x, mc_samples, seed)?, mp: mp_probs(model, x)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nn,
    Mc,
    Mp,
}

/// Metrics of one method for one seed and ensemble size.
#[derive(Debug, Clone, Serialize)]
pub struct OodRow {
    pub seed: usize,
    pub ensemble: usize,
    pub method: Method,
    pub auc: f64,
    /// Pearson correlation with the MC uncertainty on IND / OOD test rows.
    pub r_ind: f64,
    pub r_ood: f64,
    pub accuracy: f64,
    pub accuracy_lo: f64,
    pub accuracy_hi: f64,
    pub nll: f64,
    pub nll_se: f64,
    pub mean_uncertainty_ind: f64,
    pub mean_uncertainty_ood: f64,
}

/// Per-example uncertainties, for density plots.
#[derive(Debug, Clone, Serialize)]
pub struct OodExampleRow {
    pub seed: usize,
    pub ensemble: usize,
    pub index: usize,
    pub is_ood: bool,
    pub nn: f64,
    pub mc: f64,
    pub mp: f64,
}

/// Scores combined member probabilities.
pub fn ood_scores(
    seed_index: usize,
    ensemble: usize,
    probs: &MemberProbs,
    is_ood: &[bool],
    ind_labels: &[usize],
    kind: UncertaintyKind,
) -> Result<(Vec<OodRow>, Vec<OodExampleRow>)> {
    let score = |p: &Vec<Vec<f64>>| p.iter().map(|q| UncertaintyScore::of(kind, q).value).collect::<Vec<f64>>();
    let (u_nn, u_mc, u_mp) = (score(&probs.nn), score(&probs.mc), score(&probs.mp));
    let n_ind = ind_labels.len();
    let pick = |u: &[f64], ood: bool| -> Vec<f64> { u.iter().zip(is_ood).filter(|(_, &o)| o == ood).map(|(v, _)| *v).collect() };
    let corr = |a: &[f64], b: &[f64]| pearson_ci(a, b, 0.95).map(|i| i.estimate);
    let mut rows = Vec::new();
    for (method, u, p) in [(Method::Nn, &u_nn, &probs.nn), (Method::Mc, &u_mc, &probs.mc), (Method::Mp, &u_mp, &probs.mp)] {
        let auc = roc_auc(u, is_ood)?.auc;
        let ind_probs = &p[..n_ind];
        let hits = ind_probs.iter().zip(ind_labels).filter(|(q, &y)| argmax(q) == y).count();
        let acc = wilson_ci(hits, n_ind, 0.95)?;
        let (nll, nll_se) = mean_and_se(&class_nlls(ind_probs, ind_labels));
        let (r_ind, r_ood) = if method == Method::Mc {
            (1.0, 1.0)
        } else {
            (corr(&pick(u, false), &pick(&u_mc, false))?, corr(&pick(u, true), &pick(&u_mc, true))?)
        };
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(OodRow {
            seed: seed_index,
            ensemble,
            method,
            auc,
            r_ind,
            r_ood,
            accuracy: acc.estimate,
            accuracy_lo: acc.lo,
            accuracy_hi: acc.hi,
            nll,
            nll_se,
            mean_uncertainty_ind: mean(pick(u, false)),
            mean_uncertainty_ood: mean(pick(u, true)),
        });
    }
    let examples = (0..is_ood.len())
        .map(|i| OodExampleRow { seed: seed_index, ensemble, index: i, is_ood: is_ood[i], nn: u_nn[i], mc: u_mc[i], mp: u_mp[i] })
        .collect();
    Ok((rows, examples))
}

/// Median over seeds of one method and ensemble size.
#[derive(Debug, Clone, Serialize)]
pub struct OodMedianRow {
    pub ensemble: usize,
    pub method: Method,
    pub auc: f64,
    pub r_ind: f64,
    pub r_ood: f64,
    pub accuracy: f64,
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct OodResult {
    pub setups: Vec<OodSetup>,
    /// Trained members per seed.
    pub members: Vec<Vec<ModelSpec>>,
    pub rows: Vec<OodRow>,
    pub medians: Vec<OodMedianRow>,
}

impl OodResult {
    pub fn median(&self, ensemble: usize, method: Method) -> Option<&OodMedianRow> {
        self.medians.iter().find(|r| r.ensemble == ensemble && r.method == method)
    }
}

/// Runs the OOD protocol over `cfg.seeds` seeds.
pub fn run_ood(cfg: &OodConfig) -> Result<(OodResult, ExperimentReport)> {
    if cfg.seeds == 0 || cfg.ensemble_sizes.is_empty() || cfg.ensemble_sizes.contains(&0) || cfg.mc_samples == 0 {
        return Err(Error::Config("ood: seeds, ensemble sizes and mc_samples must be positive".into()));
    }
    cfg.train.validate()?;
    let max_members = *cfg.ensemble_sizes.iter().max().unwrap();
    let mut setups = Vec::new();
    let mut members = Vec::new();
    let mut rows = Vec::new();
    let mut examples = Vec::new();
    let mut runtimes = None;
    for si in 0..cfg.seeds {
        let seed = derive_seed(cfg.seed, si as u64);
        let setup = ood_data(cfg, seed)?;
        let trained: Vec<ModelSpec> = ood_train_members(cfg, &setup, seed, max_members)?.into_iter().map(|m| m.0).collect();
        let x = setup.test_inputs()?;
        let is_ood = setup.is_ood();
        let ind_labels = labels_of(&setup.ind_test)?.to_vec();
        let probs = trained
            .iter()
            .enumerate()
            .map(|(m, model)| member_probs(model, &x, cfg.mc_samples, derive_seed(seed, 200 + m as u64)))
            .collect::<Result<Vec<_>>>()?;
        for &e in &cfg.ensemble_sizes {
            let part = &probs[..e];
            let combined = MemberProbs {
                nn: mean_probs(&part.iter().map(|p| p.nn.clone()).collect::<Vec<_>>()),
                mc: mean_probs(&part.iter().map(|p| p.mc.clone()).collect::<Vec<_>>()),
                mp: mean_probs(&part.iter().map(|p| p.mp.clone()).collect::<Vec<_>>()),
            };
            let (r, ex) = ood_scores(si, e, &combined, &is_ood, &ind_labels, cfg.uncertainty)?;
            rows.extend(r);
            examples.extend(ex);
        }
        if runtimes.is_none() {
            let model = &trained[0];
            let (t_nn, _) = time_repeats(cfg.timing_repeats, || model.forward_deterministic(&x))?;
            let (t_mp, _) = time_repeats(cfg.timing_repeats, || model.forward_mp(&x))?;
            let (t_mc, _) = time_repeats(cfg.timing_repeats, || mc_forward_batch(model, &x, cfg.mc_samples, 0))?;
            runtimes = Some((t_nn, t_mp, t_mc));
        }
        setups.push(setup);
        members.push(trained);
    }
    let mut medians = Vec::new();
    for &e in &cfg.ensemble_sizes {
        for method in [Method::Nn, Method::Mc, Method::Mp] {
            let sel: Vec<&OodRow> = rows.iter().filter(|r| r.ensemble == e && r.method == method).collect();
            let med = |f: fn(&OodRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            medians.push(OodMedianRow {
                ensemble: e,
                method,
                auc: med(|r| r.auc),
                r_ind: med(|r| r.r_ind),
                r_ood: med(|r| r.r_ood),
                accuracy: med(|r| r.accuracy),
                nll: med(|r| r.nll),
            });
        }
    }
    let mut rep = ExperimentReport::new("ood", cfg)?;
    rep.set_summary(&medians)?;
    let (t_nn, t_mp, t_mc) = runtimes.unwrap();
    rep.add_runtime("nn_forward", t_nn);
    rep.add_runtime("mp_forward", t_mp);
    rep.add_runtime("mc_forward", t_mc);
    rep.add_table("metrics", &rows)?;
    rep.add_table("medians", &medians)?;
    rep.add_table("uncertainties", &examples)?;
    Ok((OodResult { setups, members, rows, medians }, rep))
}

// ---------------------------------------------------------------------------
// Filter experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub ood: OodConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { ood: OodConfig { seeds: 1, ensemble_sizes: vec![1], ..OodConfig::default() } }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterCurveRow {
    pub method: Method,
    pub cutoff: f64,
    pub retained: usize,
    pub accuracy: f64,
}

/// Accuracy of the retained IND test predictions as the uncertainty cut-off
/// tightens, for NN, MC and MP of one trained model.
pub fn filter_rows(model: &ModelSpec, setup: &OodSetup, cfg: &OodConfig, seed: u64) -> Result<Vec<FilterCurveRow>> {
    let x = setup.ind_test.feature_tensor();
    let labels = labels_of(&setup.ind_test)?;
    let p = member_probs(model, &x, cfg.mc_samples, seed)?;
    let mut out = Vec::new();
    for (method, probs) in [(Method::Nn, &p.nn), (Method::Mc, &p.mc), (Method::Mp, &p.mp)] {
        let curve: Vec<FilterRow> = filter_curve(probs, labels, cfg.uncertainty)?;
        out.extend(curve.into_iter().map(|r| FilterCurveRow { method, cutoff: r.cutoff, retained: r.retained, accuracy: r.accuracy }));
    }
    Ok(out)
}

pub fn run_filter(cfg: &FilterConfig) -> Result<(Vec<FilterCurveRow>, ExperimentReport)> {
    cfg.ood.train.validate()?;
    let seed = derive_seed(cfg.ood.seed, 0);
    let setup = ood_data(&cfg.ood, seed)?;
    let (model, _) = ood_train_members(&cfg.ood, &setup, seed, 1)?.remove(0);
    let rows = filter_rows(&model, &setup, &cfg.ood, derive_seed(seed, 200))?;
    let mut rep = ExperimentReport::new("filter", cfg)?;
    let full: Vec<(Method, f64)> = rows.iter().filter(|r| r.retained == setup.ind_test.len()).map(|r| (r.method, r.accuracy)).collect();
    rep.set_summary(&serde_json::json!({ "test_examples": setup.ind_test.len(), "full_accuracy": full }))?;
    rep.add_table("filter", &rows)?;
    Ok((rows, rep))
}

// ---------------------------------------------------------------------------
// AUC versus number of MC samples

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AucVsTConfig {
    pub ood: OodConfig,
    pub t_values: Vec<usize>,
    pub repeats: usize,
}

impl Default for AucVsTConfig {
    fn default() -> Self {
        Self {
            ood: OodConfig { seeds: 1, ensemble_sizes: vec![1], ..OodConfig::default() },
            t_values: vec![1, 2, 5, 10, 20, 30, 50],
            repeats: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AucRepeatRow {
    pub t: usize,
    pub repeat: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AucMedianRow {
    pub t: usize,
    pub median_auc: f64,
    /// Standard error of the median, `1.2533 · sd / √repeats`.
    pub median_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AucVsTSummary {
    pub auc_mp: f64,
    pub auc_nn: f64,
    pub medians: Vec<AucMedianRow>,
    /// Smallest T whose median MC AUC reaches the MP AUC.
    pub crossing_t: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AucVsTResult {
    pub rows: Vec<AucRepeatRow>,
    pub summary: AucVsTSummary,
}

/// AUC of MC dropout for every T in `t_values` over `repeats` independent
/// draws. Within a repeat the sample sets are nested: T uses the first T of
/// the largest set.
pub fn auc_vs_t(
    model: &ModelSpec,
    setup: &OodSetup,
    t_values: &[usize],
    repeats: usize,
    kind: UncertaintyKind,
    seed: u64,
) -> Result<AucVsTResult> {
    if t_values.is_empty() || t_values.contains(&0) || repeats == 0 {
        return Err(Error::Config("auc-vs-t: T values and repeats must be positive".into()));
    }
    let mut ts = t_values.to_vec();
    ts.sort_unstable();
    ts.dedup();
    let tmax = *ts.last().unwrap();
    let x = setup.test_inputs()?;
    let is_ood = setup.is_ood();
    let unc = |p: &[f64]| UncertaintyScore::of(kind, p).value;
    let auc_of = |probs: &[Vec<f64>]| -> Result<f64> { Ok(roc_auc(&probs.iter().map(|p| unc(p)).collect::<Vec<_>>(), &is_ood)?.auc) };
    let auc_mp = auc_of(&mp_probs(model, &x)?)?;
    let auc_nn = auc_of(&class_probs(model, &x)?)?;
    let mut rows = Vec::with_capacity(ts.len() * repeats);
    for r in 0..repeats {
        let batches = mc_forward_batch(model, &x, tmax, derive_seed(seed, r as u64))?;
        for &t in &ts {
            let probs = batches.iter().map(|b| Ok(b.truncate(t)?.mean())).collect::<Result<Vec<_>>>()?;
            rows.push(AucRepeatRow { t, repeat: r, auc: auc_of(&probs)? });
        }
    }
    let medians: Vec<AucMedianRow> = ts
        .iter()
        .map(|&t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.auc).collect();
            let (m, _) = mean_and_se(&v);
            let sd = if v.len() > 1 { (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() } else { 0.0 };
            AucMedianRow { t, median_auc: median(&v), median_se: 1.2533 * sd / (v.len() as f64).sqrt() }
        })
        .collect();
    let crossing_t = medians.iter().find(|m| m.median_auc >= auc_mp).map(|m| m.t);
    Ok(AucVsTResult { rows, summary: AucVsTSummary { auc_mp, auc_nn, medians, crossing_t } })
}

pub fn run_auc_vs_t(cfg: &AucVsTConfig) -> Result<(AucVsTResult, ExperimentReport)> {
    cfg.ood.train.validate()?;
    let seed = derive_seed(cfg.ood.seed, 0);
    let setup = ood_data(&cfg.ood, seed)?;
    let (model, _) = ood_train_members(&cfg.ood, &setup, seed, 1)?.remove(0);
    let res = auc_vs_t(&model, &setup, &cfg.t_values, cfg.repeats, cfg.ood.uncertainty, derive_seed(seed, 300))?;
    let mut rep = ExperimentReport::new("auc-vs-t", cfg)?;
    rep.set_summary(&res.summary)?;
    rep.add_table("auc", &res.rows)?;
    rep.add_table("medians", &res.summary.medians)?;
    Ok((res, rep))
}

// ---------------------------------------------------------------------------
// Runtime benchmark

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub mode: String,
    pub samples: Option<usize>,
    pub mean_seconds: f64,
    pub se_seconds: f64,
    pub repeats: usize,
    /// This mode's time divided by the MP time.
    pub ratio_to_mp: f64,
    /// This mode's time divided by the deterministic time.
    pub ratio_to_deterministic: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub deterministic: Timing,
    pub mp: Timing,
    pub mc: Vec<(usize, Timing)>,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkResult {
    /// MC(T) time over MP time.
    pub fn mc_over_mp(&self, t: usize) -> Option<f64> {
        self.mc.iter().find(|(s, _)| *s == t).map(|(_, m)| m.mean_seconds / self.mp.mean_seconds)
    }

    pub fn mp_over_deterministic(&self) -> f64 {
        self.mp.mean_seconds / self.deterministic.mean_seconds
    }
}

/// Times deterministic, MP and MC(T) forwards of a batch.
pub fn benchmark(model: &ModelSpec, inputs: &Tensor, t_list: &[usize], repeats: usize, seed: u64) -> Result<BenchmarkResult> {
    if t_list.contains(&0) {
        return Err(Error::InvalidArgument("MC sample counts must be positive".into()));
    }
    // Warm-up so that first-touch allocation does not land in the first mode.
    model.forward_deterministic(inputs)?;
    model.forward_mp(inputs)?;
    let (det, _) = time_repeats(repeats, || model.forward_deterministic(inputs))?;
    let (mp, _) = time_repeats(repeats, || model.forward_mp(inputs))?;
    let mut mc = Vec::new();
    for &t in t_list {
        let (tm, _) = time_repeats(repeats, || mc_forward_batch(model, inputs, t, seed))?;
        mc.push((t, tm));
    }
    let row = |mode: &str, samples: Option<usize>, t: &Timing| BenchmarkRow {
        mode: mode.into(),
        samples,
        mean_seconds: t.mean_seconds,
        se_seconds: t.se_seconds,
        repeats: t.repeats,
        ratio_to_mp: t.mean_seconds / mp.mean_seconds,
        ratio_to_deterministic: t.mean_seconds / det.mean_seconds,
    };
    let mut rows = vec![row("deterministic", None, &det), row("mp", None, &mp)];
    rows.extend(mc.iter().map(|(t, tm)| row("mc", Some(*t), tm)));
    Ok(BenchmarkResult { deterministic: det, mp, mc, rows })
}

pub fn benchmark_report<C: Serialize>(
    model: &ModelSpec,
    inputs: &Tensor,
    t_list: &[usize],
    repeats: usize,
    seed: u64,
    config: &C,
) -> Result<(BenchmarkResult, ExperimentReport)> {
    let res = benchmark(model, inputs, t_list, repeats, seed)?;
    let mut rep = ExperimentReport::new("benchmark", config)?;
    let ratios: Vec<serde_json::Value> =
        res.mc.iter().map(|(t, _)| serde_json::json!({ "t": t, "mc_over_mp": res.mc_over_mp(*t) })).collect();
    rep.set_summary(&serde_json::json!({
        "batch": inputs.shape()[0],
        "mp_over_deterministic": res.mp_over_deterministic(),
        "mc_over_mp": ratios,
    }))?;
    rep.add_runtime("deterministic", res.deterministic);
    rep.add_runtime("mp", res.mp);
    for (t, tm) in &res.mc {
        rep.add_runtime(&format!("mc_{t}"), *tm);
    }
    rep.add_table("benchmark", &res.rows)?;
    Ok((res, rep))
}

/// Features of a dataset as a batch tensor, standardised for `model`.
pub fn model_inputs(model: &ModelSpec, data: &Dataset) -> Tensor {
    model.standardize_input(&data.feature_tensor())
}

/// Number of examples of a dataset with its targets, for reports.
pub fn describe(data: &Dataset) -> serde_json::Value {
    let targets = match data.targets() {
        Targets::Regression(_) => "regression".to_string(),
        Targets::Classification { num_classes, .. } => format!("{num_classes} classes"),
    };
    serde_json::json!({ "examples": data.len(), "feature_shape": data.feature_shape(), "targets": targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ModelBuilder;

    #[test]
    fn timing_uses_at_least_three_repeats() {
        let mut calls = 0;
        let (t, v) = time_repeats(1, || {
            calls += 1;
            Ok(calls)
        })
        .unwrap();
        assert_eq!(t.repeats, 3);
        assert_eq!(v, 3);
        assert!(t.mean_seconds >= 0.0 && t.se_seconds >= 0.0);
    }

    #[test]
    fn report_writes_tables_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut rep = ExperimentReport::new("unit", &serde_json::json!({ "a": 1 })).unwrap();
        rep.add_table("rows", &[XyRow { x: 1.0, y: 2.0 }]).unwrap();
        rep.set_summary(&serde_json::json!({ "ok": true })).unwrap();
        rep.write(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("rows.csv")).unwrap(), "x,y\n1.0,2.0\n");
        let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(json["experiment"], "unit");
        assert_eq!(json["config"]["a"], 1);
        assert_eq!(json["artifacts"], serde_json::json!(["rows.csv", "summary.json"]));
    }

    #[test]
    fn compare_without_dropout_agrees_exactly() {
        let model = ModelBuilder::new(vec![3]).dense(8).relu().dropout(0.0).dense(4).softmax()
            .build(Task::Classification, None, 5)
            .unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let res = compare(&model, &x, 10, 1).unwrap();
        assert_eq!(res.summary.max_abs_mean_diff, 0.0);
        assert!(res.rows.iter().all(|r| r.mp_var == 0.0 && r.mc_var == 0.0));
        assert_eq!(res.summary.fraction_within_3se, 1.0);
    }

    #[test]
    fn compare_dropout_only_model_within_3se() {
        let model = ModelBuilder::new(vec![6]).dropout(0.4).dense(1).build(Task::Regression, Some(1.0), 2).unwrap();
        let x = Tensor::new(vec![5, 6], (0..30).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect()).unwrap();
        let res = compare(&model, &x, 20_000, 3).unwrap();
        assert!(res.summary.fraction_within_3se >= 0.9, "{:?}", res.summary);
        assert!(res.summary.median_sd_rel_diff < 0.05, "{:?}", res.summary);
    }

    #[test]
    fn auc_vs_t_has_one_row_per_repeat_and_t() {
        let cfg = OodConfig { train_per_class: 10, test_per_class: 6, image_size: 8, ..OodConfig::default() };
        let setup = ood_data(&cfg, 1).unwrap();
        let model = Architecture::Cnn { channels: vec![2], dense: vec![4], dropout: 0.3, kernel: 3 }
            .build(&[1, 8, 8], Task::Classification, 5, None, 1)
            .unwrap();
        let res = auc_vs_t(&model, &setup, &[1, 2, 5], 20, UncertaintyKind::Entropy, 4).unwrap();
        for t in [1, 2, 5] {
            assert_eq!(res.rows.iter().filter(|r| r.t == t).count(), 20);
        }
        // Nested prefixes: T=1 uses the first sample of the T=5 draw.
        assert_eq!(res.summary.medians.len(), 3);
    }

    #[test]
    fn uci_on_small_csv_emits_table_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        write_regression_csv(&path, &gen_friedman1(50, 1.0, 2).unwrap()).unwrap();
        let cfg = UciConfig {
            datasets: vec![UciDataset { name: None, path, target: TargetColumn::Last }],
            splits: 1,
            dropout_grid: vec![0.05],
            mc_samples: 20,
            train: TrainConfig { epochs: 3, ..TrainConfig::default() },
            ..UciConfig::default()
        };
        let (res, rep) = run_uci(&cfg).unwrap();
        assert_eq!(res.table.len(), 1);
        let header = rep.table("table").unwrap().lines().next().unwrap().to_string();
        for col in ["dataset", "n", "q", "rmse_mc", "rmse_mp", "nll_mc", "nll_mp", "rt_mc", "rt_mp"] {
            assert!(header.split(',').any(|c| c == col), "missing {col} in {header}");
        }
        assert_eq!(res.table[0].n, 50);
        assert_eq!(res.table[0].q, 10);
    }

    #[test]
    fn uci_without_datasets_is_a_data_error() {
        assert!(matches!(run_uci(&UciConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn cifar_requires_long_running_flag() {
        let cfg = OodConfig { cifar_dir: Some("/nonexistent".into()), ..OodConfig::default() };
        assert!(matches!(ood_data(&cfg, 0), Err(Error::Config(_))));
    }
}
