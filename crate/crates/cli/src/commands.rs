use std::path::{Path, PathBuf};

use momentprop::data::{read_csv_features, TargetColumn};
use momentprop::experiment::{
    benchmark_report, compare_report, load_config, model_inputs, run_auc_vs_t, run_filter, run_ood, run_toy, run_train_job,
    run_uci, AucVsTConfig, DataSource, ExperimentReport, FilterConfig, OodConfig, ToyConfig, TrainJob, UciConfig,
};
use momentprop::format::encode_model;
use momentprop::metrics::entropy;
use momentprop::{load_model, Error, ForwardMode, ModelSpec, PredictiveDistribution, Result, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{Cli, Command, ExperimentName, Mode, ModelInput};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { job } => train(cli, job.as_deref()),
        Command::Compare { input, samples } => compare(cli, input, *samples),
        Command::Experiment { name } => experiment(cli, *name),
        Command::Benchmark { input, samples, repeats } => benchmark(cli, input, samples, *repeats),
        Command::Predict { input, mode, samples } => predict(cli, input, *mode, *samples),
    }
}

/// `--out`, or `runs/<command>-<local time>`.
fn run_dir(cli: &Cli, command: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        PathBuf::from("runs").join(format!("{command}-{stamp}"))
    })
}

fn echo<C: Serialize>(command: &str, config: &C) -> Result<()> {
    println!("{command} configuration:\n{}", serde_json::to_string_pretty(config)?);
    Ok(())
}

fn finish(cli: &Cli, command: &str, report: &mut ExperimentReport) -> Result<()> {
    let dir = run_dir(cli, command);
    let summary = report.write(&dir)?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    println!("wrote {}", summary.display());
    Ok(())
}

fn config_or_default<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(path) => load_config(path),
        None => Ok(T::default()),
    }
}

fn train(cli: &Cli, job: Option<&Path>) -> Result<()> {
    let path = job
        .or(cli.config.as_deref())
        .ok_or_else(|| Error::Config("train needs a job config (positional argument or --config)".into()))?;
    let mut job = TrainJob::from_path(path)?;
    if let Some(seed) = cli.seed {
        job.seed = seed;
        job.train.seed = seed;
    }
    echo("train", &job)?;
    let (result, mut report) = run_train_job(&job)?;
    report.add_file(&format!("{}.mpmdl", job.name), encode_model(&result.model)?);
    finish(cli, "train", &mut report)
}

fn experiment(cli: &Cli, name: ExperimentName) -> Result<()> {
    let seed = cli.seed;
    let (label, mut report) = match name {
        ExperimentName::Toy => {
            let mut cfg: ToyConfig = config_or_default(cli)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            echo("toy", &cfg)?;
            ("toy", run_toy(&cfg)?.1)
        }
        ExperimentName::Uci => {
            let mut cfg: UciConfig = config_or_default(cli)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            echo("uci", &cfg)?;
            ("uci", run_uci(&cfg)?.1)
        }
        ExperimentName::Ood => {
            let mut cfg: OodConfig = config_or_default(cli)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            echo("ood", &cfg)?;
            ("ood", run_ood(&cfg)?.1)
        }
        ExperimentName::Filter => {
            let mut cfg: FilterConfig = config_or_default(cli)?;
            cfg.ood.seed = seed.unwrap_or(cfg.ood.seed);
            echo("filter", &cfg)?;
            ("filter", run_filter(&cfg)?.1)
        }
        ExperimentName::AucVsT => {
            let mut cfg: AucVsTConfig = config_or_default(cli)?;
            cfg.ood.seed = seed.unwrap_or(cfg.ood.seed);
            echo("auc-vs-t", &cfg)?;
            ("auc-vs-t", run_auc_vs_t(&cfg)?.1)
        }
    };
    finish(cli, label, &mut report)
}

/// Parses `--data` into a data source; `None` means a features-only CSV.
fn data_source(input: &ModelInput, model: &ModelSpec) -> Result<Option<DataSource>> {
    let spec = input.data.as_str();
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let count = |what: &str| -> Result<usize> {
        rest.split(':')
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Config(format!("--data {kind} needs {what}, as in {kind}:100")))?
            .parse()
            .map_err(|_| Error::Config(format!("--data {spec}: {what} must be a positive integer")))
    };
    let source = match kind {
        "toy" if rest.is_empty() => DataSource::Toy { n: 600, noise_sd: 0.1, x_range: momentprop::data::TOY_RANGE },
        "toy" => DataSource::Toy { n: count("a size")?, noise_sd: 0.1, x_range: momentprop::data::TOY_RANGE },
        "friedman1" => DataSource::Friedman1 { n: count("a size")?, noise_sd: 1.0 },
        "images" => {
            let n_per_class = count("a count per class")?;
            let size = match model.input_shape() {
                [_, h, _] => *h,
                _ => return Err(Error::Config("image data needs a model with [C, H, W] input".into())),
            };
            let pixel_noise = match rest.split(':').nth(1) {
                Some(v) => v.parse().map_err(|_| Error::Config(format!("--data {spec}: bad pixel noise")))?,
                None => momentprop::data::IMAGE_PIXEL_NOISE,
            };
            DataSource::SyntheticImages { n_per_class, num_classes: 10, size, pixel_noise, ind_classes: None }
        }
        "cifar10" if !rest.is_empty() => DataSource::Cifar10 { path: PathBuf::from(rest) },
        _ => {
            let path = PathBuf::from(spec);
            match input.target.as_deref() {
                Some("none") => return Ok(None),
                Some(t) => {
                    let target = t.parse().map(TargetColumn::Index).unwrap_or_else(|_| TargetColumn::Name(t.to_string()));
                    DataSource::Csv { path, target }
                }
                None => DataSource::Csv { path, target: TargetColumn::Last },
            }
        }
    };
    Ok(Some(source))
}

/// Loads the model and the (standardised) input batch of a model command.
fn model_and_inputs(input: &ModelInput, seed: u64) -> Result<(ModelSpec, Tensor)> {
    let model = load_model(&input.model)?;
    let x = match data_source(input, &model)? {
        Some(source) => model_inputs(&model, &source.load(seed)?),
        None => model.standardize_input(&read_csv_features(Path::new(&input.data))?),
    };
    let x = match input.limit {
        Some(0) => return Err(Error::Config("--limit must be positive".into())),
        Some(n) if n < x.shape()[0] => {
            let per: usize = x.shape()[1..].iter().product();
            let mut shape = x.shape().to_vec();
            shape[0] = n;
            Tensor::new(shape, x.data()[..n * per].to_vec())?
        }
        _ => x,
    };
    Ok((model, x))
}

#[derive(Serialize)]
struct ModelCommandConfig<'a> {
    model: &'a Path,
    data: &'a str,
    target: Option<&'a str>,
    limit: Option<usize>,
    examples: usize,
    seed: u64,
    #[serde(flatten)]
    extra: serde_json::Value,
}

fn model_config<'a>(input: &'a ModelInput, x: &Tensor, seed: u64, extra: serde_json::Value) -> ModelCommandConfig<'a> {
    ModelCommandConfig {
        model: &input.model,
        data: &input.data,
        target: input.target.as_deref(),
        limit: input.limit,
        examples: x.shape()[0],
        seed,
        extra,
    }
}

fn compare(cli: &Cli, input: &ModelInput, samples: usize) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (model, x) = model_and_inputs(input, seed)?;
    let cfg = model_config(input, &x, seed, serde_json::json!({ "samples": samples }));
    echo("compare", &cfg)?;
    let (_, mut report) = compare_report(&model, &x, samples, seed, &cfg)?;
    finish(cli, "compare", &mut report)
}

fn benchmark(cli: &Cli, input: &ModelInput, samples: &[usize], repeats: usize) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (model, x) = model_and_inputs(input, seed)?;
    let cfg = model_config(input, &x, seed, serde_json::json!({ "samples": samples, "repeats": repeats }));
    echo("benchmark", &cfg)?;
    let (_, mut report) = benchmark_report(&model, &x, samples, repeats, seed, &cfg)?;
    finish(cli, "benchmark", &mut report)
}

#[derive(Serialize)]
struct GaussianRow {
    example: usize,
    mean: f64,
    /// Epistemic variance.
    variance: f64,
    /// Epistemic plus observation-noise variance.
    predictive_variance: f64,
}

#[derive(Serialize)]
struct CategoricalRow {
    example: usize,
    predicted: usize,
    max_probability: f64,
    entropy: f64,
}

#[derive(Serialize)]
struct ProbabilityRow {
    example: usize,
    class: usize,
    probability: f64,
}

fn predict(cli: &Cli, input: &ModelInput, mode: Mode, samples: usize) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (model, x) = model_and_inputs(input, seed)?;
    let (forward, mode_name) = match mode {
        Mode::Det => (ForwardMode::Deterministic, "deterministic"),
        Mode::Mp => (ForwardMode::MomentPropagation, "mp"),
        Mode::Mc => (ForwardMode::McSample { samples, seed }, "mc"),
    };
    let extra = match mode {
        Mode::Mc => serde_json::json!({ "mode": mode_name, "samples": samples }),
        _ => serde_json::json!({ "mode": mode_name }),
    };
    let cfg = model_config(input, &x, seed, extra);
    echo("predict", &cfg)?;
    let preds = model.predict(&x, forward)?;
    let mut report = ExperimentReport::new("predict", &cfg)?;
    let mut gaussian = Vec::new();
    let mut categorical = Vec::new();
    let mut probabilities = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        match p {
            PredictiveDistribution::Gaussian { mean, variance, .. } => gaussian.push(GaussianRow {
                example: i,
                mean: *mean,
                variance: *variance,
                predictive_variance: p.predictive_variance().unwrap_or(f64::NAN),
            }),
            PredictiveDistribution::Categorical { probs } => {
                let (predicted, max_probability) =
                    probs.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |b, (c, q)| if q > b.1 { (c, q) } else { b });
                categorical.push(CategoricalRow { example: i, predicted, max_probability, entropy: entropy(probs) });
                probabilities.extend(probs.iter().enumerate().map(|(c, &q)| ProbabilityRow { example: i, class: c, probability: q }));
            }
        }
    }
    if !gaussian.is_empty() {
        report.add_table("predictions", &gaussian)?;
    } else {
        report.add_table("predictions", &categorical)?;
        report.add_table("probabilities", &probabilities)?;
    }
    report.set_summary(&serde_json::json!({ "examples": preds.len(), "mode": mode_name }))?;
    finish(cli, "predict", &mut report)
}
