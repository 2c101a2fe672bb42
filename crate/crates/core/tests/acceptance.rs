//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.
//!
//! `cargo test --test acceptance` runs everything; `cargo test --test
//! acceptance -- 4 10` runs only criteria 4 and 10.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use momentprop::data::Targets;
use momentprop::experiment::{
    auc_vs_t, benchmark, ood_data, ood_train_members, run_ood, run_toy, run_uci, Method, OodConfig, OodResult, OodSetup,
    ToyConfig, UciConfig,
};
use momentprop::layers::conv::{Conv2DSpec, Padding};
use momentprop::layers::dense::DenseSpec;
use momentprop::layers::dropout::DropoutSpec;
use momentprop::layers::maxpool::{maxpool2d_mp, maxpool_pair, MaxPool2DSpec};
use momentprop::layers::relu::relu_moments;
use momentprop::layers::softmax::{softmax_forward, softmax_mp};
use momentprop::layers::LayerSpec;
use momentprop::metrics::{mann_whitney_auc, roc_auc, wilson_ci, UncertaintyKind};
use momentprop::rng::derive_seed;
use momentprop::training::{Architecture, Loss, ModelBuilder, Trainable};
use momentprop::{layer_oracle, GaussianScalar, ModelSpec, MomentEstimate, MomentTensor, MpDiagnostics, OracleInput, Task, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Same allocator as the command-line binary, so that timings match it.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> momentprop::Result<Outcome>;

struct Criterion {
    id: u32,
    name: &'static str,
    /// Wall-clock budget in seconds.
    budget: Option<f64>,
    check: Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "layer exactness (dropout, dense, conv)", budget: Some(120.0), check: layer_exactness },
    Criterion { id: 2, name: "relu on a Gaussian", budget: Some(120.0), check: relu_on_gaussian },
    Criterion { id: 3, name: "max-pool approximation band", budget: Some(120.0), check: maxpool_band },
    Criterion { id: 4, name: "softmax band", budget: Some(120.0), check: softmax_band },
    Criterion { id: 5, name: "zero-dropout equivalence", budget: None, check: zero_dropout },
    Criterion { id: 6, name: "toy regression", budget: Some(900.0), check: toy_regression },
    Criterion { id: 7, name: "regression benchmark schema", budget: Some(1800.0), check: uci_agreement },
    Criterion { id: 8, name: "OOD detection on synthetic images", budget: Some(1800.0), check: ood_detection },
    Criterion { id: 9, name: "AUC versus T", budget: None, check: auc_versus_t },
    Criterion { id: 10, name: "runtime on the reference CNN", budget: None, check: runtime_ratios },
    Criterion { id: 11, name: "gradients versus finite differences", budget: None, check: gradients },
    Criterion { id: 12, name: "metric oracles", budget: None, check: metric_oracles },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check));
        let secs = t0.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        if let Some(b) = c.budget {
            if secs > b {
                pass = false;
                detail += &format!("; over the {b:.0} s budget");
            }
        }
        println!("{} #{:<2} {}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" }, c.id, c.name);
        ran += 1;
        if !pass {
            failed.push(c.id);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}

fn within_3se(mp: f64, est: f64, se: f64) -> bool {
    // The floor only matters for outputs the oracle sees as constant.
    (mp - est).abs() <= 3.0 * se + 1e-12 * (1.0 + est.abs())
}

fn moment_case(mp_e: f64, mp_v: f64, est: &MomentEstimate, i: usize) -> bool {
    within_3se(mp_e, est.mean[i], est.standard_error_mean[i]) && within_3se(mp_v, est.variance[i], est.standard_error_variance[i])
}

fn random_gaussians(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> MomentTensor {
    let n: usize = shape.iter().product();
    let e = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    // Some nodes are deterministic.
    let v = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..2.0) }).collect();
    MomentTensor::new(shape, e, v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

const CASES: usize = 100;
const REQUIRED: usize = 97;

/// Runs `CASES` random cases of one layer kind and counts the output nodes
/// whose MP mean and variance both lie within 3 SE of the oracle.
fn exactness_cases(seed: u64, samples: usize, make: impl Fn(&mut ChaCha8Rng) -> (LayerSpec, MomentTensor)) -> momentprop::Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut good = 0;
    for case in 0..CASES {
        let (layer, input) = make(&mut rng);
        let out = layer.forward_mp(&input, input.shape(), &mut MpDiagnostics::default())?;
        let est = layer_oracle(&layer, &OracleInput::Gaussian(input), samples, derive_seed(seed, case as u64))?;
        let i = rng.random_range(0..out.len());
        good += usize::from(moment_case(out.expectation()[i], out.variance()[i], &est, i));
    }
    Ok(good)
}

fn layer_exactness() -> momentprop::Result<Outcome> {
    let dropout = exactness_cases(11, 1_000_000, |rng| {
        let d = rng.random_range(1..=8);
        (LayerSpec::Dropout(DropoutSpec::new(rng.random_range(0.05..0.9)).unwrap()), random_gaussians(rng, vec![d]))
    })?;
    let dense = exactness_cases(12, 1_000_000, |rng| {
        let (i, o) = (rng.random_range(1..=10), rng.random_range(1..=6));
        let spec = DenseSpec::new(i, o, uniform(rng, i * o), uniform(rng, o)).unwrap();
        (LayerSpec::Dense(spec), random_gaussians(rng, vec![i]))
    })?;
    let conv = exactness_cases(13, 1_000_000, |rng| {
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let stride = rng.random_range(1..=2);
        let spec = Conv2DSpec::new(co, ci, kh, kw, uniform(rng, co * ci * kh * kw), uniform(rng, co), padding, stride).unwrap();
        (LayerSpec::Conv2d(spec), random_gaussians(rng, vec![ci, h, w]))
    })?;
    Ok(Outcome {
        pass: dropout >= REQUIRED && dense >= REQUIRED && conv >= REQUIRED,
        detail: format!("within 3 SE: dropout {dropout}/{CASES}, dense {dense}/{CASES}, conv {conv}/{CASES} (need {REQUIRED})"),
    })
}

fn relu_on_gaussian() -> momentprop::Result<Outcome> {
    let pi = std::f64::consts::PI;
    let std = relu_moments(GaussianScalar::new(0.0, 1.0)?, &mut MpDiagnostics::default());
    let closed_err = (std.mean - 1.0 / (2.0 * pi).sqrt()).abs().max((std.variance - (0.5 - 0.5 / pi)).abs());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut good = 0;
    for case in 0..CASES {
        let (e, v) = (rng.random_range(-3.0..3.0), rng.random_range(0.01..4.0));
        let mp = relu_moments(GaussianScalar::new(e, v)?, &mut MpDiagnostics::default());
        let input = MomentTensor::new(vec![1], vec![e], vec![v])?;
        let est = layer_oracle(&LayerSpec::Relu, &OracleInput::Gaussian(input), 10_000_000, derive_seed(21, case as u64))?;
        good += usize::from(moment_case(mp.mean, mp.variance, &est, 0));
    }
    Ok(Outcome {
        pass: closed_err <= 1e-6 && good >= REQUIRED,
        detail: format!("closed form error {closed_err:.1e}; within 3 SE of 1e7-sample oracles {good}/{CASES} (need {REQUIRED})"),
    })
}

/// Sample moments of `f` over `n` draws, in the form of [`MomentEstimate`].
fn sample_moments(n: usize, seed: u64, mut f: impl FnMut(&mut ChaCha8Rng) -> f64) -> MomentEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| f(&mut rng)).collect();
    let nf = n as f64;
    let m = xs.iter().sum::<f64>() / nf;
    let c2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf;
    let c4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / nf;
    let var = c2 * nf / (nf - 1.0);
    MomentEstimate {
        mean: vec![m],
        variance: vec![var],
        standard_error_mean: vec![(var / nf).sqrt()],
        standard_error_variance: vec![((c4 - var * var * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt()],
        samples: n,
    }
}

fn maxpool_band() -> momentprop::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut pairs = 0;
    for case in 0..CASES {
        let (e1, v1) = (rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0));
        let (e2, v2) = (rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0));
        let mp = maxpool_pair(GaussianScalar::new(e1, v1)?, GaussianScalar::new(e2, v2)?, &mut MpDiagnostics::default());
        let (s1, s2) = (f64::sqrt(v1), f64::sqrt(v2));
        let est = sample_moments(1_000_000, derive_seed(31, case as u64), |r| {
            let (z1, z2): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
            (e1 + s1 * z1).max(e2 + s2 * z2)
        });
        pairs += usize::from(moment_case(mp.mean, mp.variance, &est, 0));
    }
    let pool = LayerSpec::MaxPool2d(MaxPool2DSpec::new(2)?);
    let (mut windows, mut worst_e, mut worst_v) = (0, 0.0f64, 0.0f64);
    for case in 0..CASES as u64 {
        let e = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
        let input = MomentTensor::new(vec![1, 2, 2], e, v)?;
        let mp = maxpool2d_mp(&input, &MaxPool2DSpec::new(2)?)?;
        let est = layer_oracle(&pool, &OracleInput::Gaussian(input), 1_000_000, derive_seed(32, case))?;
        let rel_e = (mp.expectation()[0] - est.mean[0]).abs() / est.mean[0].abs();
        let rel_v = (mp.variance()[0] - est.variance[0]).abs() / est.variance[0];
        worst_e = worst_e.max(rel_e);
        worst_v = worst_v.max(rel_v);
        windows += usize::from(rel_e <= 0.02 && rel_v <= 0.02);
    }
    Ok(Outcome {
        pass: pairs >= REQUIRED && windows == CASES,
        detail: format!(
            "K=2 within 3 SE {pairs}/{CASES} (need {REQUIRED}); K=4 within 2% {windows}/{CASES} (need all), \
             worst relative error mean {worst_e:.4} variance {worst_v:.4}"
        ),
    })
}

fn softmax_band() -> momentprop::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut good, mut worst) = (0, 0.0f64);
    for case in 0..CASES as u64 {
        let e = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
        let input = MomentTensor::new(vec![5], e, v)?;
        let p = softmax_mp(&input)?;
        let est = layer_oracle(&LayerSpec::Softmax, &OracleInput::Gaussian(input), 1_000_000, derive_seed(41, case))?;
        let err = p.data().iter().zip(&est.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        good += usize::from(err <= 0.05);
    }
    Ok(Outcome {
        pass: good == CASES,
        detail: format!("all classes within 0.05 in {good}/{CASES} configurations, largest error {worst:.4}"),
    })
}

fn random_network(i: u64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(51, i));
    if i % 2 == 0 {
        let channels = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
        let dense = (0..rng.random_range(0..=2)).map(|_| rng.random_range(4..=16)).collect();
        let arch = Architecture::Cnn { channels, dense, dropout: 0.0, kernel: rng.random_range(2..=3) };
        let size = rng.random_range(8..=12);
        arch.build(&[rng.random_range(1..=2), size, size], Task::Classification, rng.random_range(2..=6), None, i).unwrap()
    } else {
        let hidden = (0..rng.random_range(1..=3)).map(|_| rng.random_range(4..=32)).collect();
        let task = if i % 4 == 1 { Task::Regression } else { Task::Classification };
        let tau = (task == Task::Regression).then_some(1.0);
        Architecture::Mlp { hidden, dropout: 0.0 }.build(&[rng.random_range(1..=6)], task, 4, tau, i).unwrap()
    }
}

fn zero_dropout() -> momentprop::Result<Outcome> {
    let (mut exact, mut worst_prob) = (0, 0.0f64);
    for i in 0..20 {
        let model = random_network(i);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(52, i));
        let mut shape = vec![8];
        shape.extend_from_slice(model.input_shape());
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())?;

        // Layer by layer, then the whole pass.
        let mut ok = true;
        let mut m = MomentTensor::deterministic(&x);
        let mut y = x.clone();
        for (l, layer) in model.layers().iter().enumerate() {
            if matches!(layer, LayerSpec::Softmax) {
                break;
            }
            m = layer.forward_mp(&m, model.layer_input_shape(l), &mut MpDiagnostics::default())?;
            y = layer.forward(&y, model.layer_input_shape(l))?;
            ok &= m.expectation().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ok &= m.variance().iter().all(|&v| v == 0.0);
        }
        let mp = model.forward_mp(&x)?;
        let logits = model.logits_deterministic(&x)?;
        ok &= mp.moments.expectation().iter().zip(logits.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ok &= mp.moments.variance().iter().all(|&v| v == 0.0);
        if let Some(p) = &mp.probabilities {
            let q = softmax_forward(&logits)?;
            worst_prob = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(worst_prob, f64::max);
        }
        exact += usize::from(ok);
    }
    Ok(Outcome {
        pass: exact == 20 && worst_prob <= 1e-3,
        detail: format!("bitwise equal with zero variance {exact}/20; largest probability difference {worst_prob:.2e}"),
    })
}

fn toy_regression() -> momentprop::Result<Outcome> {
    let (res, _) = run_toy(&ToyConfig::default())?;
    let s = &res.summary;
    Ok(Outcome {
        pass: s.fraction_within_3se >= 0.95 && s.median_sd_rel_diff <= 0.15,
        detail: format!(
            "{} grid points, within 3 SE {:.3} (need 0.95), median SD relative difference {:.3} (need <= 0.15), training {:.0} s",
            s.inside_points, s.fraction_within_3se, s.median_sd_rel_diff, s.train_seconds
        ),
    })
}

fn uci_agreement() -> momentprop::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = UciConfig { synthetic: true, synthetic_dir: Some(dir.path().to_path_buf()), ..UciConfig::default() };
    let (res, _) = run_uci(&cfg)?;
    let mut pass = res.table.len() >= 2;
    let mut parts = Vec::new();
    for r in &res.table {
        let d_nll = (r.nll_mp - r.nll_mc).abs();
        let d_rmse = (r.rmse_mp - r.rmse_mc).abs() / r.rmse_mc;
        pass &= d_nll <= 0.1 && d_rmse <= 0.03;
        parts.push(format!(
            "{}: NLL MP {:.3} MC {:.3}, RMSE MP {:.3} MC {:.3} ({:+.2}%)",
            r.dataset,
            r.nll_mp,
            r.nll_mc,
            r.rmse_mp,
            r.rmse_mc,
            100.0 * (r.rmse_mp - r.rmse_mc) / r.rmse_mc
        ));
    }
    Ok(Outcome { pass, detail: parts.join("; ") })
}

static OOD: OnceLock<OodResult> = OnceLock::new();

fn ood_config() -> OodConfig {
    OodConfig { ensemble_sizes: vec![1], ..OodConfig::default() }
}

/// The first-seed model and data of the OOD run (trained on demand when
/// criterion 8 has not run).
fn reference_model() -> momentprop::Result<(OodSetup, ModelSpec)> {
    if let Some(r) = OOD.get() {
        return Ok((r.setups[0].clone(), r.members[0][0].clone()));
    }
    let cfg = ood_config();
    let seed = derive_seed(cfg.seed, 0);
    let setup = ood_data(&cfg, seed)?;
    let (model, _) = ood_train_members(&cfg, &setup, seed, 1)?.remove(0);
    Ok((setup, model))
}

fn ood_detection() -> momentprop::Result<Outcome> {
    let (res, _) = run_ood(&ood_config())?;
    let res = OOD.get_or_init(|| res);
    let (nn, mc, mp) = (res.median(1, Method::Nn).unwrap(), res.median(1, Method::Mc).unwrap(), res.median(1, Method::Mp).unwrap());
    let pass = mp.r_ind > nn.r_ind && mp.r_ood > nn.r_ood && mp.auc >= nn.auc + 0.01 && (mp.auc - mc.auc).abs() <= 0.02;
    Ok(Outcome {
        pass,
        detail: format!(
            "medians over 5 seeds: r(IND) MP {:.3} NN {:.3}; r(OOD) MP {:.3} NN {:.3}; AUC NN {:.4} MC {:.4} MP {:.4}; accuracy {:.3}",
            mp.r_ind, nn.r_ind, mp.r_ood, nn.r_ood, nn.auc, mc.auc, mp.auc, mp.accuracy
        ),
    })
}

fn auc_versus_t() -> momentprop::Result<Outcome> {
    let (setup, model) = reference_model()?;
    let ts = [1, 2, 5, 10, 20, 30, 50, 100];
    let res = auc_vs_t(&model, &setup, &ts, 20, UncertaintyKind::Entropy, 9)?;
    let m = &res.summary.medians;
    // A drop counts as noise when it is within two standard errors of the
    // difference of the two medians.
    let monotone = m.windows(2).all(|w| w[1].median_auc >= w[0].median_auc - 2.0 * w[0].median_se.hypot(w[1].median_se));
    let crossing = res.summary.crossing_t;
    let curve: Vec<String> = m.iter().map(|r| format!("{}:{:.4}", r.t, r.median_auc)).collect();
    Ok(Outcome {
        pass: monotone && matches!(crossing, Some(t) if (5..=100).contains(&t)),
        detail: format!(
            "AUC MP {:.4}; median MC AUC {}; nondecreasing up to noise: {monotone}; crossing T {}",
            res.summary.auc_mp,
            curve.join(" "),
            crossing.map_or("none".into(), |t| t.to_string())
        ),
    })
}

fn runtime_ratios() -> momentprop::Result<Outcome> {
    let (setup, model) = reference_model()?;
    let x = setup.test_inputs()?;
    let per: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = 1000;
    let x = Tensor::new(shape, x.data()[..1000 * per].to_vec())?;
    let b = benchmark(&model, &x, &[30], 5, 0)?;
    let mc_over_mp = b.mc_over_mp(30).unwrap();
    let mp_over_det = b.mp_over_deterministic();
    Ok(Outcome {
        pass: mc_over_mp >= 0.8 * 30.0 / 2.0 && mp_over_det <= 4.0,
        detail: format!(
            "1000 images: MC(30)/MP {mc_over_mp:.2} (need >= 12), MP/deterministic {mp_over_det:.2} (need <= 4); \
             MP {:.3} s, deterministic {:.3} s",
            b.mp.mean_seconds, b.deterministic.mean_seconds
        ),
    })
}

fn gradient_instance(i: u64) -> (ModelSpec, Tensor, Targets, Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(61, i));
    let batch = rng.random_range(1..=4);
    let (model, x_shape, targets, loss) = if i % 2 == 0 {
        let q = rng.random_range(1..=5);
        let mut b = ModelBuilder::new(vec![q]);
        for _ in 0..rng.random_range(1..=2) {
            b = b.dense(rng.random_range(2..=8)).relu().dropout(rng.random_range(0.0..0.5));
        }
        let model = b.dense(1).build(Task::Regression, Some(1.0), i).unwrap();
        let y = (0..batch).map(|_| rng.sample(StandardNormal)).collect();
        (model, vec![batch, q], Targets::Regression(y), Loss::Mse)
    } else {
        let (c, size, k) = (rng.random_range(1..=2), rng.random_range(5..=7), rng.random_range(2..=4));
        let model = ModelBuilder::new(vec![c, size, size])
            .conv2d(rng.random_range(1..=3), rng.random_range(2..=3))
            .relu()
            .maxpool(2)
            .dropout(rng.random_range(0.0..0.5))
            .conv2d_valid(rng.random_range(1..=3), 2)
            .flatten()
            .dense(k)
            .softmax()
            .build(Task::Classification, None, i)
            .unwrap();
        let labels = (0..batch).map(|_| rng.random_range(0..k)).collect();
        (model, vec![batch, c, size, size], Targets::Classification { labels, num_classes: k }, Loss::CategoricalNll)
    };
    let n: usize = x_shape.iter().product();
    let x = Tensor::new(x_shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    (model, x, targets, loss)
}

fn gradients() -> momentprop::Result<Outcome> {
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-5);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for i in 0..12 {
        let (model, mut x, targets, loss) = gradient_instance(i);
        let mask_seed = Some(derive_seed(62, i));
        let mut net = Trainable::new(&model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(63, i));
        for p in net.params_mut() {
            p.iter_mut().for_each(|w| *w += rng.random_range(-0.05..0.05));
        }
        let (_, g) = net.loss_and_gradients(&x, &targets, loss, mask_seed)?;
        for t in 0..g.params.len() {
            for j in 0..g.params[t].len() {
                let orig = net.params()[t][j];
                net.params_mut()[t][j] = orig + h;
                let up = net.loss_value(&x, &targets, loss, mask_seed)?;
                net.params_mut()[t][j] = orig - h;
                let down = net.loss_value(&x, &targets, loss, mask_seed)?;
                net.params_mut()[t][j] = orig;
                worst = worst.max(rel(g.params[t][j], (up - down) / (2.0 * h)));
                checked += 1;
            }
        }
        for j in 0..x.len() {
            let orig = x.data()[j];
            x.data_mut()[j] = orig + h;
            let up = net.loss_value(&x, &targets, loss, mask_seed)?;
            x.data_mut()[j] = orig - h;
            let down = net.loss_value(&x, &targets, loss, mask_seed)?;
            x.data_mut()[j] = orig;
            worst = worst.max(rel(g.input[j], (up - down) / (2.0 * h)));
            checked += 1;
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-4,
        detail: format!("12 random networks, {checked} partial derivatives, largest relative error {worst:.2e}"),
    })
}

fn metric_oracles() -> momentprop::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // Every other instance has heavily tied scores.
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect()
        } else {
            (0..n).map(|_| rng.sample(StandardNormal)).collect()
        };
        let a = roc_auc(&scores, &labels)?.auc;
        let b = mann_whitney_auc(&scores, &labels)?;
        worst = worst.max((a - b).abs());
    }
    let ci = wilson_ci(7168, 10_000, 0.95)?;
    let wilson_err = (ci.lo - 0.7079).abs().max((ci.hi - 0.7255).abs());
    Ok(Outcome {
        pass: worst <= 1e-12 && wilson_err <= 1e-3,
        detail: format!(
            "ROC AUC versus Mann-Whitney largest difference {worst:.1e} over {CASES} instances; \
             Wilson (7168, 10000) = [{:.4}, {:.4}]",
            ci.lo, ci.hi
        ),
    })
}
