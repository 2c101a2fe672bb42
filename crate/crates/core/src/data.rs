//! Datasets: generators, loaders, splitting and standardisation.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Vec<f64>),
    /// Class indices below `num_classes`.
    Classification { labels: Vec<usize>, num_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => Targets::Regression(idx.iter().map(|&i| y[i]).collect()),
            Targets::Classification { labels, num_classes } => Targets::Classification {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
        }
    }
}

/// `N` examples with per-example feature shape (`[Q]` for tabular data,
/// `[C, H, W]` for images).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_shape: Vec<usize>,
    targets: Targets,
}

impl Dataset {
    pub fn new(features: Vec<f64>, feature_shape: Vec<usize>, targets: Targets) -> Result<Self> {
        let row: usize = feature_shape.iter().product();
        if row == 0 || features.len() != row * targets.len() {
            return Err(Error::Data(format!(
                "{} feature values do not match {} targets of shape {:?}",
                features.len(),
                targets.len(),
                feature_shape
            )));
        }
        if let Targets::Classification { labels, num_classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
            }
        }
        Ok(Self { features, feature_shape, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let q = self.feature_len();
        &self.features[i * q..(i + 1) * q]
    }

    /// Features as a batch tensor `[N, ...feature_shape]`.
    pub fn feature_tensor(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::from_parts(shape, self.features.clone())
    }

    pub fn regression_targets(&self) -> Option<&[f64]> {
        match &self.targets {
            Targets::Regression(y) => Some(y),
            _ => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classification { labels, .. } => Some(labels),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classification { num_classes, .. } => Some(*num_classes),
            _ => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let q = self.feature_len();
        let mut features = Vec::with_capacity(idx.len() * q);
        for &i in idx {
            features.extend_from_slice(&self.features[i * q..(i + 1) * q]);
        }
        Dataset { features, feature_shape: self.feature_shape.clone(), targets: self.targets.subset(idx) }
    }

    /// Concatenates datasets with identical feature shapes and target kinds.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut targets = first.targets.subset(&[]);
        for p in parts {
            if p.feature_shape != first.feature_shape {
                return Err(Error::Data("feature shapes differ".into()));
            }
            features.extend_from_slice(&p.features);
            match (&mut targets, &p.targets) {
                (Targets::Regression(a), Targets::Regression(b)) => a.extend_from_slice(b),
                (
                    Targets::Classification { labels: a, num_classes: ka },
                    Targets::Classification { labels: b, num_classes: kb },
                ) => {
                    a.extend_from_slice(b);
                    *ka = (*ka).max(*kb);
                }
                _ => return Err(Error::Data("target kinds differ".into())),
            }
        }
        Dataset::new(features, first.feature_shape.clone(), targets)
    }
}

/// Zero-mean unit-variance transform fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // Constant columns are centred but left unscaled.
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

impl Standardization {
    /// Fits feature (and, for regression, target) statistics on `train`.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot standardise an empty split".into()));
        }
        let q = train.feature_len();
        let (mut feature_mean, mut feature_std) = (Vec::with_capacity(q), Vec::with_capacity(q));
        for j in 0..q {
            let (m, s) = mean_std(train.features.iter().skip(j).step_by(q).copied());
            feature_mean.push(m);
            feature_std.push(s);
        }
        let (target_mean, target_std) = match &train.targets {
            Targets::Regression(y) => mean_std(y.iter().copied()),
            Targets::Classification { .. } => (0.0, 1.0),
        };
        Ok(Self { feature_mean, feature_std, target_mean, target_std })
    }

    pub fn apply_features(&self, x: &mut [f64]) {
        let q = self.feature_mean.len();
        for row in x.chunks_exact_mut(q) {
            for ((v, m), s) in row.iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert_features(&self, x: &mut [f64]) {
        let q = self.feature_mean.len();
        for row in x.chunks_exact_mut(q) {
            for ((v, m), s) in row.iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
                *v = *v * s + m;
            }
        }
    }

    pub fn apply_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn invert_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    /// Standardised copy of `data` (features always, targets for regression).
    pub fn transform(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        self.apply_features(&mut out.features);
        if let Targets::Regression(y) = &mut out.targets {
            for v in y.iter_mut() {
                *v = self.apply_target(*v);
            }
        }
        out
    }
}

/// Train / validation / test partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Statistics of the raw training split, when the splits are standardised.
    pub standardization: Option<Standardization>,
}

/// Split sizes for `n` examples: train and validation are rounded, test takes the rest.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {:?} must be non-negative and sum to 1", fractions)));
    }
    let train = (n as f64 * a).round() as usize;
    let val = ((n as f64 * b).round() as usize).min(n - train);
    Ok((train, val, n - train - val))
}

/// Shuffles and splits `data`; splits are disjoint and cover every example.
pub fn split(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<SplitDataset> {
    let (ntr, nva, _) = split_sizes(data.len(), fractions)?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitDataset {
        train: data.subset(&idx[..ntr]),
        validation: data.subset(&idx[ntr..ntr + nva]),
        test: data.subset(&idx[ntr + nva..]),
        standardization: None,
    })
}

/// Fits standardisation on the training split and applies it to all splits.
pub fn standardize(splits: SplitDataset) -> Result<SplitDataset> {
    let s = Standardization::fit(&splits.train)?;
    Ok(SplitDataset {
        train: s.transform(&splits.train),
        validation: s.transform(&splits.validation),
        test: s.transform(&splits.test),
        standardization: Some(s),
    })
}

/// Smooth multi-modal target of the toy regression problem.
pub fn toy_function(x: f64) -> f64 {
    0.3 * x * (0.4 * x).sin()
}

/// Default training range of the toy problem.
pub const TOY_RANGE: (f64, f64) = (-3.0, 19.0);

/// `n` points with `x ~ U(range)` and `y = f(x) + N(0, noise_sd²)`.
pub fn gen_toy_regression(n: usize, range: (f64, f64), noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || range.1 <= range.0 || noise_sd < 0.0 {
        return Err(Error::InvalidArgument("toy data needs n >= 1, a non-empty range and noise_sd >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(range.0..range.1);
        let z: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(toy_function(x) + noise_sd * z);
    }
    Dataset::new(xs, vec![1], Targets::Regression(ys))
}

/// Evenly spaced evaluation points on `[lo, hi]`, inclusive.
pub fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Which CSV column holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

/// Header and rows of a numeric CSV, checked for width and missing cells.
fn read_numeric_csv(path: &Path) -> Result<(csv::StringRecord, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let ncol = headers.len();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != ncol {
            return Err(Error::Data(format!("row {}: expected {ncol} cells, got {}", line + 1, record.len())));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                if cell.is_empty() {
                    return Err(Error::Data(format!("row {}, column {:?}: missing value", line + 1, &headers[j])));
                }
                cell.parse().map_err(|_| {
                    Error::Data(format!("row {}, column {:?}: non-numeric cell {cell:?}", line + 1, &headers[j]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok((headers, rows))
}

/// Parses a numeric CSV with a header row into a regression dataset
/// (all non-target columns are features).
pub fn read_csv_regression(path: &Path, target: &TargetColumn) -> Result<Dataset> {
    let (headers, rows) = read_numeric_csv(path)?;
    let ncol = headers.len();
    if ncol < 2 {
        return Err(Error::Data(format!("{}: need at least two columns", path.display())));
    }
    let target_idx = match target {
        TargetColumn::Last => ncol - 1,
        TargetColumn::Index(i) if *i < ncol => *i,
        TargetColumn::Index(i) => return Err(Error::Data(format!("target column {i} out of range ({ncol} columns)"))),
        TargetColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("no column named {name:?}")))?,
    };
    let mut features = Vec::with_capacity(rows.len() * (ncol - 1));
    let mut targets = Vec::with_capacity(rows.len());
    for row in rows {
        for (j, v) in row.into_iter().enumerate() {
            if j == target_idx {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    Dataset::new(features, vec![ncol - 1], Targets::Regression(targets))
}

/// Parses a numeric CSV in which every column is a feature into an `[N, Q]`
/// batch.
pub fn read_csv_features(path: &Path) -> Result<Tensor> {
    let (headers, rows) = read_numeric_csv(path)?;
    let n = rows.len();
    Tensor::new(vec![n, headers.len()], rows.concat())
}

/// Reads, shuffles, splits and standardises a regression CSV.
pub fn load_csv_regression(
    path: &Path,
    target: &TargetColumn,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDataset> {
    let data = read_csv_regression(path, target)?;
    standardize(split(&data, fractions, seed)?)
}

/// Pixel noise standard deviation of [`gen_synthetic_images`].
pub const IMAGE_PIXEL_NOISE: f64 = 0.2;

/// Noise-free pattern of class `class` at coordinates `(u, v)` in [-1, 1]²,
/// with per-image jitter `(dx, dy, width)`.
fn class_pattern(class: usize, u: f64, v: f64, dx: f64, dy: f64, width: f64) -> f64 {
    let bar = |d: f64| (-(d / width).powi(2)).exp();
    let (x, y) = (u - dx, v - dy);
    // Classes beyond the ten base families reuse them with a rotation.
    let angle = (class / 10) as f64 * 0.35;
    let (x, y) = (x * angle.cos() - y * angle.sin(), x * angle.sin() + y * angle.cos());
    let r = (x * x + y * y).sqrt();
    match class % 10 {
        0 => bar(y),
        1 => bar(x),
        2 => bar((x - y) * FRAC_1_SQRT_2),
        3 => bar((x + y) * FRAC_1_SQRT_2),
        4 => (-(r * r) / 0.18).exp(),
        5 => bar(r - 0.55),
        6 => 0.5 * (x + 1.0),
        7 => 0.5 * (y + 1.0),
        8 => bar(x).max(bar(y)),
        _ => {
            let blob = |cx: f64, cy: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.04).exp();
            blob(0.5, 0.5) + blob(-0.5, 0.5) + blob(0.5, -0.5) + blob(-0.5, -0.5)
        }
    }
}

/// Procedural `[1, size, size]` images: bars, blobs, rings, gradients and
/// crosses with random shift, width and contrast plus Gaussian pixel noise.
pub fn gen_synthetic_images(n_per_class: usize, num_classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_images_with_noise(n_per_class, num_classes, size, IMAGE_PIXEL_NOISE, seed)
}

/// [`gen_synthetic_images`] with a chosen pixel noise standard deviation.
pub fn gen_synthetic_images_with_noise(
    n_per_class: usize,
    num_classes: usize,
    size: usize,
    pixel_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(pixel_noise >= 0.0 && pixel_noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("pixel noise must be finite and nonnegative, got {pixel_noise}")));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be positive (empty dataset)".into()));
    }
    if num_classes < 2 || size < 4 {
        return Err(Error::InvalidArgument("need at least 2 classes and 4x4 images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = size * size;
    let mut features = Vec::with_capacity(n_per_class * num_classes * px);
    let mut labels = Vec::with_capacity(n_per_class * num_classes);
    for _ in 0..n_per_class {
        for class in 0..num_classes {
            let dx = rng.random_range(-0.2..0.2);
            let dy = rng.random_range(-0.2..0.2);
            let width = rng.random_range(0.12..0.22);
            let contrast = rng.random_range(0.7..1.0);
            for i in 0..size {
                for j in 0..size {
                    let v = 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;
                    let u = 2.0 * (j as f64 + 0.5) / size as f64 - 1.0;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(contrast * class_pattern(class, u, v, dx, dy, width) + pixel_noise * z);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(features, vec![1, size, size], Targets::Classification { labels, num_classes })
}

/// Splits a classification dataset into in-distribution classes (relabelled
/// `0..ind.len()` in the given order) and the remaining out-of-distribution
/// classes (which keep their original labels).
pub fn ood_partition(data: &Dataset, ind_classes: &[usize]) -> Result<(Dataset, Dataset)> {
    let (labels, k) = match &data.targets {
        Targets::Classification { labels, num_classes } => (labels, *num_classes),
        Targets::Regression(_) => return Err(Error::InvalidArgument("OOD partition needs class labels".into())),
    };
    let mut seen = vec![false; k];
    for &c in ind_classes {
        if c >= k || seen[c] {
            return Err(Error::InvalidArgument(format!("invalid or repeated IND class {c}")));
        }
        seen[c] = true;
    }
    if ind_classes.is_empty() || ind_classes.len() == k {
        return Err(Error::InvalidArgument(
            "IND classes must be a nonempty proper subset (OOD would be empty)".into(),
        ));
    }
    let mut remap = vec![usize::MAX; k];
    for (new, &c) in ind_classes.iter().enumerate() {
        remap[c] = new;
    }
    let (ind_idx, ood_idx): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| seen[labels[i]]);
    let mut ind = data.subset(&ind_idx);
    if let Targets::Classification { labels, num_classes } = &mut ind.targets {
        labels.iter_mut().for_each(|l| *l = remap[*l]);
        *num_classes = ind_classes.len();
    }
    Ok((ind, data.subset(&ood_idx)))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch (`label, 1024 R, 1024 G, 1024 B` per record).
pub fn parse_cifar10_batch(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 batch of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Data(format!("CIFAR-10 label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        features.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(features, vec![3, 32, 32], Targets::Classification { labels, num_classes: 10 })
}

/// Loads a CIFAR-10 binary batch file, or every `*.bin` batch in a directory
/// (sorted by name). Nothing is downloaded.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        return parse_cifar10_batch(&fs::read(path)?);
    }
    if !path.is_dir() {
        return Err(Error::Data(format!("{} does not exist", path.display())));
    }
    let mut files: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin") && p.file_name().is_some_and(|n| n != "batches.meta.bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no CIFAR-10 .bin batches in {}", path.display())));
    }
    let parts = files.iter().map(|f| parse_cifar10_batch(&fs::read(f)?)).collect::<Result<Vec<_>>>()?;
    Dataset::concat(&parts.iter().collect::<Vec<_>>())
}

/// Loads the official split of a CIFAR-10 directory: `data_batch_*.bin`
/// for training and `test_batch.bin` for testing.
pub fn load_cifar10_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch") && n.ends_with(".bin")))
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Data(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let parts = train_files.iter().map(|f| parse_cifar10_batch(&fs::read(f)?)).collect::<Result<Vec<_>>>()?;
    let train = Dataset::concat(&parts.iter().collect::<Vec<_>>())?;
    let test_path = dir.join("test_batch.bin");
    if !test_path.is_file() {
        return Err(Error::Data(format!("{} is missing", test_path.display())));
    }
    Ok((train, parse_cifar10_batch(&fs::read(test_path)?)?))
}

/// Friedman's first benchmark: ten uniform inputs on [0,1], five of them
/// relevant, `y = 10 sin(π x1 x2) + 20 (x3 − 0.5)² + 10 x4 + 5 x5 + ε`.
pub fn gen_friedman1(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * 10);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let f = 10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4];
        let e: f64 = rng.sample(StandardNormal);
        targets.push(f + noise_sd * e);
        features.extend(x);
    }
    Dataset::new(features, vec![10], Targets::Regression(targets))
}

/// Friedman's third benchmark: `y = atan((x2 x3 − 1/(x2 x4)) / x1) + ε` with
/// `x1 ∈ [0,100]`, `x2 ∈ [40π, 560π]`, `x3 ∈ [0,1]`, `x4 ∈ [1,11]`.
pub fn gen_friedman3(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let pi = std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * 4);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = [
            100.0 * rng.random::<f64>(),
            40.0 * pi + 520.0 * pi * rng.random::<f64>(),
            rng.random::<f64>(),
            1.0 + 10.0 * rng.random::<f64>(),
        ];
        let f = ((x[1] * x[2] - 1.0 / (x[1] * x[3])) / x[0]).atan();
        let e: f64 = rng.sample(StandardNormal);
        targets.push(f + noise_sd * e);
        features.extend(x);
    }
    Dataset::new(features, vec![4], Targets::Regression(targets))
}

/// Writes a flat regression dataset as CSV with columns `x1..xQ,y`.
pub fn write_regression_csv(path: &Path, data: &Dataset) -> Result<()> {
    let y = data.regression_targets().ok_or_else(|| Error::Data("regression targets required".into()))?;
    let q = data.feature_len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=q).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (i, &t) in y.iter().enumerate() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(t.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
