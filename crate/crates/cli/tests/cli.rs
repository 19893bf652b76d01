use std::path::Path;
use std::process::{Command, Output};

use isrflow::{ModelFile, RunConfig};

fn isrflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isrflow"))
        .args(args)
        .env_remove("ISRFLOW_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const TINY: &str = "experiment = \"density\"\nseed = 4\n[model]\nblocks = 1\nhidden_layers = 1\n\
                    [train]\nepochs = 0\n[benchmark]\nkind = \"gaussian\"\nn_train = 64\nn_eval = 32\nn_reference = 32\n";

fn train_tiny(dir: &Path) -> String {
    let cfg = write_config(dir, TINY);
    let out = dir.join("run");
    let o = isrflow(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("model.json").to_str().unwrap().to_owned()
}

#[test]
fn zero_epoch_training_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path());
    let file = ModelFile::load(Path::new(&model)).unwrap();
    let cfg = RunConfig::from_toml(TINY).unwrap();
    assert_eq!(file.model, isrflow::experiment::build_model(&cfg).unwrap());
    assert!(dir.path().join("run/history.csv").exists());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"density\"\n[train]\nepochs = -1\n");
    assert_eq!(isrflow(&["train", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "experiment = \"density\"\nunknown_key = 1\n");
    assert_eq!(isrflow(&["train", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "experiment = \"inverse\"\n[benchmark]\nkind = \"ring\"\n");
    assert_eq!(isrflow(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn sampling_zero_rows_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path());
    let o = isrflow(&["sample", "--model", &model, "--n", "0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "x_1,x_2\n");
}

#[test]
fn sampling_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path());
    let a = isrflow(&["sample", "--model", &model, "--n", "50", "--seed", "9"]);
    let b = isrflow(&["sample", "--model", &model, "--n", "50", "--seed", "9"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 51);
}

#[test]
fn untrained_model_extracts_to_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path());
    let o = isrflow(&["extract", "--model", &model]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "z = x\n");
}

#[test]
fn evaluate_reports_the_metric_keys() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path());
    let o = isrflow(&["evaluate", "--model", &model, "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["benchmark", "err_post", "nll", "n_model_samples", "kernel"] {
        assert!(v.get(key).is_some(), "missing {key} in {v}");
    }
    assert_eq!(v["n_model_samples"], 32);
}

#[test]
fn oracle_samples_satisfy_the_tolerance() {
    let o = isrflow(&[
        "oracle",
        "--target-y",
        "0,1.5",
        "--eps",
        "0.2",
        "--n",
        "20",
        "--seed",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x_1,x_2,x_3,x_4"));
    let spec = isrflow::KinematicsSpec::default();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    for r in rows {
        let y = spec.forward(&r);
        assert!(y[0].hypot(y[1] - 1.5) <= 0.2);
    }
}

#[test]
fn selftest_passes() {
    let o = isrflow(&["selftest", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn thread_count_is_validated() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_isrflow"))
            .args(["oracle", "--eps", "0.3", "--n", "5"])
            .env("ISRFLOW_THREADS", v)
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert_eq!(run("0").status.code(), Some(2));
    assert_eq!(run("many").status.code(), Some(2));
}
