//! Scoring rules, uncertainty scores, ROC analysis, confidence intervals and
//! ensembles. Natural logarithms throughout.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::SampleBatch;
use crate::moments::std_normal_quantile;
use crate::network::PredictiveDistribution;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `-log N(y; mean, variance)`.
pub fn gaussian_nll(y: f64, mean: f64, variance: f64) -> f64 {
    0.5 * (2.0 * PI * variance).ln() + (y - mean).powi(2) / (2.0 * variance)
}

/// Negative log-likelihood of `y` under `N(mean, variance + 1/tau)`.
pub fn regression_nll_mp(mean: f64, variance: f64, tau: f64, y: f64) -> f64 {
    gaussian_nll(y, mean, variance + 1.0 / tau)
}

/// Negative log-likelihood of `y` under the equal-weight mixture of
/// `N(mu_t, 1/tau)`, evaluated with log-sum-exp.
pub fn regression_nll_mc_slice(mus: &[f64], tau: f64, y: f64) -> f64 {
    let t = mus.len() as f64;
    let log_terms = mus.iter().map(|m| -0.5 * tau * (y - m).powi(2));
    let max = log_terms.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_terms.map(|l| (l - max).exp()).sum::<f64>().ln();
    -(lse - t.ln() + 0.5 * tau.ln() - HALF_LN_2PI)
}

/// [`regression_nll_mc_slice`] over the scalar outputs of a sample batch.
pub fn regression_nll_mc(samples: &SampleBatch, tau: f64, y: f64) -> Result<f64> {
    if samples.output_len() != 1 {
        return Err(Error::Shape(format!("regression NLL needs scalar outputs, got {:?}", samples.output_shape())));
    }
    Ok(regression_nll_mc_slice(samples.outputs(), tau, y))
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> f64 {
    let n = predictions.len() as f64;
    (predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Sample mean and standard error (`sd / √n`, unbiased sd) of `values`.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// RMSE and mean NLL of a set of regression predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionScore {
    pub rmse: f64,
    pub nll: f64,
    /// Standard error of the mean NLL across examples.
    pub nll_se: f64,
    /// `log p(y_i | x_i)` per example.
    pub log_densities: Vec<f64>,
}

impl RegressionScore {
    pub fn new(means: &[f64], targets: &[f64], nlls: &[f64]) -> Self {
        let (nll, nll_se) = mean_and_se(nlls);
        Self { rmse: rmse(means, targets), nll, nll_se, log_densities: nlls.iter().map(|v| -v).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Entropy,
    OneMinusMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub kind: UncertaintyKind,
    pub value: f64,
}

impl UncertaintyScore {
    pub fn of(kind: UncertaintyKind, probs: &[f64]) -> Self {
        let value = match kind {
            UncertaintyKind::Entropy => entropy(probs),
            UncertaintyKind::OneMinusMax => one_minus_max(probs),
        };
        Self { kind, value }
    }
}

/// `-Σ π ln π` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

pub fn one_minus_max(probs: &[f64]) -> f64 {
    1.0 - probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// ROC curve with positives predicted for scores at or above each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Decreasing thresholds; the first is `+∞` (nothing predicted positive).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// ROC analysis where a higher score means "positive" (e.g. OOD).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("ROC analysis needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x, y) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x - fpr.last().unwrap()) * (y + tpr.last().unwrap()) / 2.0;
        thresholds.push(s);
        fpr.push(x);
        tpr.push(y);
    }
    Ok(RocResult { thresholds, fpr, tpr, auc })
}

/// Normalised Mann–Whitney U, `P(S+ > S-) + ½ P(S+ = S-)`, via mid-ranks.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return Err(Error::InvalidArgument("Mann-Whitney U needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += idx[i..j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// One row of a filter curve: the `retained` most certain examples
/// (uncertainty ≤ `cutoff`) and their accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub cutoff: f64,
    pub retained: usize,
    pub accuracy: f64,
}

/// Accuracy of the most-certain prefixes, ordering examples by ascending
/// uncertainty (ties by index).
pub fn filter_curve(probs: &[Vec<f64>], labels: &[usize], kind: UncertaintyKind) -> Result<Vec<FilterRow>> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidArgument("filter curve needs matching, nonempty inputs".into()));
    }
    let u: Vec<f64> = probs.iter().map(|p| UncertaintyScore::of(kind, p).value).collect();
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
    let mut correct = 0usize;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if argmax(&probs[i]) == labels[i] {
                correct += 1;
            }
            FilterRow { cutoff: u[i], retained: k + 1, accuracy: correct as f64 / (k + 1) as f64 }
        })
        .collect())
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
}

/// Estimate with a two-sided confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Pearson correlation with a Fisher-z confidence interval.
pub fn pearson_ci(x: &[f64], y: &[f64], level: f64) -> Result<Interval> {
    let n = x.len();
    if n != y.len() || n < 4 {
        return Err(Error::InvalidArgument("pearson_ci needs at least 4 paired values".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance in x or y".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if r.abs() == 1.0 {
        return Ok(Interval { estimate: r, lo: r, hi: r });
    }
    let z = r.atanh();
    let half = std_normal_quantile(0.5 + level / 2.0) / ((n - 3) as f64).sqrt();
    Ok(Interval { estimate: r, lo: (z - half).tanh(), hi: (z + half).tanh() })
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: usize, n: usize, level: f64) -> Result<Interval> {
    if n == 0 || successes > n {
        return Err(Error::InvalidArgument(format!("invalid proportion {successes}/{n}")));
    }
    let z = std_normal_quantile(0.5 + level / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    // The bounds are exactly 0 and 1 at the extremes; avoid rounding residue there.
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (centre + half).min(1.0) };
    Ok(Interval { estimate: p, lo, hi })
}

/// Combines ensemble members. Classification averages probability vectors;
/// regression forms the mixture moments, reported with
/// `1/τ = mean(1/τ_m)` and `variance = mean(V_m) + var(mean_m)` so that the
/// total predictive variance equals `mean(V_m + 1/τ_m) + var(mean_m)`.
pub fn ensemble_combine(members: &[PredictiveDistribution]) -> Result<PredictiveDistribution> {
    let m = members.len() as f64;
    match members.first() {
        None => Err(Error::InvalidArgument("empty ensemble".into())),
        Some(PredictiveDistribution::Categorical { probs }) => {
            let k = probs.len();
            let mut acc = vec![0.0; k];
            for member in members {
                match member {
                    PredictiveDistribution::Categorical { probs } if probs.len() == k => {
                        acc.iter_mut().zip(probs).for_each(|(a, p)| *a += p);
                    }
                    _ => return Err(Error::InvalidArgument("heterogeneous ensemble members".into())),
                }
            }
            acc.iter_mut().for_each(|a| *a /= m);
            Ok(PredictiveDistribution::Categorical { probs: acc })
        }
        Some(PredictiveDistribution::Gaussian { .. }) => {
            let mut parts = Vec::with_capacity(members.len());
            for member in members {
                match member {
                    PredictiveDistribution::Gaussian { mean, variance, tau } => parts.push((*mean, *variance, *tau)),
                    _ => return Err(Error::InvalidArgument("heterogeneous ensemble members".into())),
                }
            }
            let mean = parts.iter().map(|p| p.0).sum::<f64>() / m;
            let spread = parts.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / m;
            let epistemic = parts.iter().map(|p| p.1).sum::<f64>() / m;
            let noise = parts.iter().map(|p| 1.0 / p.2).sum::<f64>() / m;
            Ok(PredictiveDistribution::Gaussian { mean, variance: epistemic + spread, tau: 1.0 / noise })
        }
    }
}

/// Writes serialisable rows as a CSV table with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a value as pretty-printed JSON.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}
