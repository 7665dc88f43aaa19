use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mebt::model::{Backend, MebtModel, ModelConfig};
use mebt::trainer::MetricRecord;

fn mebt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mebt"))
        .args(args)
        .env("MEBT_RUN_DIR", root)
        .output()
        .expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn small_model(dir: &Path) -> PathBuf {
    let cfg = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        n_latent: 4,
        grid: (4, 2, 2),
        vocab: 64,
        dropout: 0.0,
        backend: Backend::Mebt,
        window: 4,
    };
    let path = dir.join("m.ckpt");
    MebtModel::new(cfg, 1).unwrap().save(&path, 0, 1).unwrap();
    path
}

#[test]
fn usage_and_config_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    for args in [
        vec!["sample", "--set", "decode.top_k=0"],
        vec!["sample", "--set", "decode.unknown=1"],
        vec!["sample", "--config", "/no/such/config.json"],
        vec!["sample"],
        vec!["frobnicate"],
        vec!["data", "build", "--seed", "x"],
    ] {
        let out = mebt(r, &args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn runtime_failures_exit_1() {
    let root = tempfile::tempdir().unwrap();
    let bogus = root.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let set = format!("paths.model={}", bogus.display());
    let out = mebt(root.path(), &["sample", "--set", &set]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sampling_is_reproducible_and_replayable() {
    let root = tempfile::tempdir().unwrap();
    let model = small_model(root.path());
    let set = format!("paths.model={}", model.display());
    let args = [
        "sample",
        "--set",
        &set,
        "--set",
        "decode.S=5",
        "--set",
        "sample.count=2",
        "--seed",
        "7",
    ];
    let a = run_dir(&mebt(root.path(), &args));
    let b = run_dir(&mebt(root.path(), &args));
    assert_ne!(a, b);
    let snap = a.join("config.json");
    let c = run_dir(&mebt(root.path(), &["sample", "--config", snap.to_str().unwrap()]));
    for i in 0..2 {
        let name = format!("samples/tokens_{i:03}.mbt");
        let first = std::fs::read(a.join(&name)).unwrap();
        assert_eq!(first, std::fs::read(b.join(&name)).unwrap());
        assert_eq!(first, std::fs::read(c.join(&name)).unwrap());
    }
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&snap).unwrap()).unwrap();
    assert_eq!(cfg["decode"]["S"], 5);
    assert_eq!(cfg["decode"]["seed"], 7);
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["decode.seed"], "flag");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    // S + N_R * R forwards
    assert_eq!(summary["forwards"], serde_json::json!([9, 9]));
}

fn read_metrics(dir: &Path) -> Vec<MetricRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn pipeline_from_corpus_to_samples() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let data = run_dir(&mebt(
        r,
        &[
            "data",
            "build",
            "--set",
            "data.count=3",
            "--set",
            "data.held_out=2",
            "--set",
            "data.lengths=[16]",
        ],
    ));
    let corpus = format!("paths.corpus={}", data.join("corpus").display());
    let held = format!("paths.held_out={}", data.join("held_out").display());
    let tok = run_dir(&mebt(
        r,
        &[
            "tokenizer",
            "train",
            "--set",
            &corpus,
            "--set",
            "tokenizer.train.steps=3",
        ],
    ));
    assert_eq!(
        std::fs::read_to_string(tok.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let tok_set = format!("paths.tokenizer={}", tok.join("tokenizer.ckpt").display());
    let common = [
        "--set",
        &corpus,
        "--set",
        &held,
        "--set",
        &tok_set,
        "--set",
        "model.grid=[4,4,4]",
        "--set",
        "model.d_model=8",
        "--set",
        "model.num_heads=2",
        "--set",
        "model.n_latent=4",
        "--set",
        "model.num_layers=2",
        "--set",
        "train.batch=2",
    ];
    let mut args = vec!["model", "train"];
    args.extend(common);
    args.extend([
        "--set",
        "train.steps=40",
        "--set",
        "train.curriculum=gaussian",
        "--set",
        "train.alpha=30000",
        "--set",
        "train.beta_sched=2",
    ]);
    let m = run_dir(&mebt(r, &args));
    let log = read_metrics(&m);
    assert_eq!(log.len(), 40);
    assert!(log.iter().all(|x| (1..=4).contains(&x.v)));
    assert!(log.iter().any(|x| x.v == 1));
    // a fast ramp reaches the full clip length late in the run
    let mut fast = vec!["model", "train"];
    fast.extend(common);
    fast.extend([
        "--set",
        "train.steps=40",
        "--set",
        "train.curriculum=gaussian",
        "--set",
        "train.alpha=2",
        "--set",
        "train.beta_sched=0.5",
    ]);
    let f = read_metrics(&run_dir(&mebt(r, &fast)));
    let mean = |s: &[MetricRecord]| s.iter().map(|x| x.v as f64).sum::<f64>() / s.len() as f64;
    assert!(mean(&f[..5]) < mean(&f[30..]));
    assert!(f[30..].iter().all(|x| x.v == 4));
    let mut ar = vec!["model", "train"];
    ar.extend(common);
    ar.extend(["--set", "train.steps=2", "--set", "arch=ar"]);
    let a = run_dir(&mebt(r, &ar));
    let model_set = format!("paths.model={}", m.join("checkpoints/final.ckpt").display());
    let mut sample = vec![
        "sample",
        "--set",
        &model_set,
        "--set",
        "sample.count=2",
        "--set",
        "decode.S=4",
    ];
    sample.extend(common);
    let s = run_dir(&mebt(r, &sample));
    for f in ["tokens_000.mbt", "video_000.mbt", "frames_000.png", "video_001.gif"] {
        assert!(s.join("samples").join(f).exists(), "{f}");
    }
    let ar_set = format!("paths.model={}", a.join("checkpoints/final.ckpt").display());
    let mut ar_sample = vec!["sample", "--set", &ar_set, "--set", "sample.count=2"];
    ar_sample.extend(common);
    let s2 = run_dir(&mebt(r, &ar_sample));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s2.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["forwards"], serde_json::json!([64, 64]));
    let samples = format!("paths.samples={}", s.display());
    let mut q = vec!["eval", "quality", "--set", &samples, "--set", "eval.features.steps=5"];
    q.extend(common);
    let qd = run_dir(&mebt(r, &q));
    let quality: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(qd.join("quality.json")).unwrap()).unwrap();
    assert_eq!(quality["curve"]["starts"], serde_json::json!([0]));
    let ar_model = format!("paths.ar_model={}", a.join("checkpoints/final.ckpt").display());
    let features = format!("paths.features={}", qd.join("features.ckpt").display());
    let mut d = vec![
        "eval",
        "drift",
        "--set",
        &model_set,
        "--set",
        &ar_model,
        "--set",
        &features,
        "--set",
        "eval.samples=2",
        "--set",
        "decode.S=4",
    ];
    d.extend(common);
    let dd = run_dir(&mebt(r, &d));
    assert!(dd.join("drift.json").exists());
}

#[test]
fn scaling_bench_writes_report_and_plot() {
    let root = tempfile::tempdir().unwrap();
    let out = mebt(
        root.path(),
        &[
            "bench",
            "scaling",
            "--set",
            "bench.lengths=[64,128,256]",
            "--set",
            "bench.frame=[4,4]",
        ],
    );
    let dir = run_dir(&out);
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("scaling.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert!(reports[0]["records"][0]["peak_bytes"].as_u64().unwrap() > 0);
    assert!(dir.join("scaling.png").exists());
}
