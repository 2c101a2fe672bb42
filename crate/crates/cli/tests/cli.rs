use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn momentprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momentprop")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY_JOB: &str = r#"
name = "tiny"
seed = 1
data = { kind = "toy", n = 80 }
architecture = { kind = "mlp", hidden = [16, 16], dropout = 0.2 }

[train]
epochs = 5
batch_size = 16
lr_reduction = false
early_stopping = false
"#;

/// Trains the tiny toy model into `dir/run` and returns the model path.
fn train_tiny(dir: &Path, seed: &str) -> PathBuf {
    let job = dir.join("job.toml");
    fs::write(&job, TOY_JOB).unwrap();
    let run = dir.join(format!("run-{seed}"));
    let out = momentprop(&["train", s(&job), "--seed", seed, "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run.join("tiny.mpmdl")
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&momentprop(&[])), 2);
    assert_eq!(code(&momentprop(&["frobnicate"])), 2);
    assert_eq!(code(&momentprop(&["experiment", "nope"])), 2);
    let out = momentprop(&["train"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
    assert_eq!(code(&momentprop(&["train", "/nonexistent/job.toml"])), 2);
}

#[test]
fn help_exits_0() {
    let out = momentprop(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train", "compare", "experiment", "benchmark", "predict"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "5");
    let b = {
        let other = dir.path().join("again");
        fs::create_dir(&other).unwrap();
        train_tiny(&other, "5")
    };
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = {
        let other = dir.path().join("other-seed");
        fs::create_dir(&other).unwrap();
        train_tiny(&other, "6")
    };
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let run = a.parent().unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "train");
    // Defaults are resolved in the echo.
    assert_eq!(summary["config"]["seed"], 5);
    assert_eq!(summary["config"]["train"]["optimizer"]["kind"], "adam");
    assert_eq!(summary["config"]["train"]["lr_reduction"], false);
    assert!(summary["summary"]["tau"].as_f64().unwrap() > 0.0);
    assert_eq!(header(&run.join("epochs.csv")), "epoch,train_loss,validation_loss,learning_rate");
}

#[test]
fn model_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), "2");

    let out_dir = dir.path().join("pred");
    let out = momentprop(&["predict", "--model", s(&model), "--data", "toy:30", "--mode", "mp", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(&out_dir.join("predictions.csv")), "example,mean,variance,predictive_variance");
    assert_eq!(fs::read_to_string(out_dir.join("predictions.csv")).unwrap().lines().count(), 31);

    let cmp = dir.path().join("cmp");
    let out = momentprop(&[
        "compare", "--model", s(&model), "--data", "toy:40", "--limit", "10", "--samples", "500", "--seed", "3", "--out", s(&cmp),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(&cmp.join("moments.csv")), "example,output,mp_mean,mp_var,mc_mean,mc_var,mc_se,z");
    assert_eq!(fs::read_to_string(cmp.join("moments.csv")).unwrap().lines().count(), 11);
    // Bit-reproducible apart from timings.
    let cmp2 = dir.path().join("cmp2");
    let out = momentprop(&[
        "compare", "--model", s(&model), "--data", "toy:40", "--limit", "10", "--samples", "500", "--seed", "3", "--out", s(&cmp2),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(cmp.join("moments.csv")).unwrap(), fs::read(cmp2.join("moments.csv")).unwrap());

    let bench = dir.path().join("bench");
    let out = momentprop(&[
        "benchmark", "--model", s(&model), "--data", "toy:64", "--samples", "1,4", "--repeats", "3", "--out", s(&bench),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(bench.join("benchmark.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("mode,samples,mean_seconds,se_seconds,repeats,ratio_to_mp,ratio_to_deterministic"));

    let csv = dir.path().join("x.csv");
    fs::write(&csv, "x\n0.5\n1.5\n").unwrap();
    let feat = dir.path().join("feat");
    let out = momentprop(&[
        "predict", "--model", s(&model), "--data", s(&csv), "--target", "none", "--mode", "mc", "--samples", "50", "--out", s(&feat),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(feat.join("predictions.csv")).unwrap().lines().count(), 3);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), "1");
    let out = momentprop(&["predict", "--model", s(&model), "--data", "/nonexistent.csv", "--out", s(&dir.path().join("p"))]);
    assert_eq!(code(&out), 3);
    let out = momentprop(&["predict", "--model", "/nonexistent.mpmdl", "--data", "toy:5", "--out", s(&dir.path().join("p"))]);
    assert_eq!(code(&out), 3);
    // Three feature columns for a one-input model.
    let csv = dir.path().join("wide.csv");
    fs::write(&csv, "a,b,c\n1,2,3\n").unwrap();
    let out = momentprop(&["predict", "--model", s(&model), "--data", s(&csv), "--target", "none", "--out", s(&dir.path().join("p"))]);
    assert_eq!(code(&out), 3);

    let cfg = dir.path().join("uci.toml");
    fs::write(&cfg, "datasets = [{ name = \"gone\", path = \"/nonexistent/gone.csv\" }]\n").unwrap();
    let out = momentprop(&["experiment", "uci", "--config", s(&cfg), "--out", s(&dir.path().join("u"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let job = dir.path().join("job.toml");
    fs::write(
        &job,
        TOY_JOB.replace("batch_size = 16", "batch_size = 16\noptimizer = { kind = \"sgd\", lr = 1e200 }"),
    )
    .unwrap();
    let out = momentprop(&["train", s(&job), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn uci_experiment_on_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("small.csv");
    let mut text = String::from("a,b,y\n");
    for i in 0..50 {
        let (a, b) = ((i as f64 * 0.31).sin(), (i as f64 * 0.17).cos());
        text += &format!("{a},{b},{}\n", 2.0 * a - b + 0.1 * (i as f64 * 1.3).sin());
    }
    fs::write(&csv, text).unwrap();
    let cfg = dir.path().join("uci.toml");
    fs::write(
        &cfg,
        format!(
            "splits = 1\ndropout_grid = [0.05]\ntau_grid = [1.0]\nmc_samples = 20\ndatasets = [{{ name = \"small\", path = {:?} }}]\n[train]\nepochs = 3\n",
            s(&csv)
        ),
    )
    .unwrap();
    let run = dir.path().join("u");
    let out = momentprop(&["experiment", "uci", "--config", s(&cfg), "--seed", "4", "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(run.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    for col in ["rmse_mc", "rmse_mp", "nll_mc", "nll_mp", "rt_mc", "rt_mp"] {
        assert!(table.lines().next().unwrap().contains(col), "{col} missing: {table}");
    }
}

#[test]
fn default_run_directory_is_timestamped() {
    let dir = tempfile::tempdir().unwrap();
    let job = dir.path().join("job.toml");
    fs::write(&job, TOY_JOB).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_momentprop")).args(["train", "job.toml"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(runs.len(), 1);
    let name = &runs[0];
    assert!(name.starts_with("train-") && name.len() == "train-20260101-000000".len(), "{name}");
}
