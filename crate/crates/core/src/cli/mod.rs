//! Command-line entry point. Every command resolves a [`RunConfig`], creates
//! a fresh run directory under `$MEBT_RUN_DIR` (default `runs/`), snapshots
//! the resolved config there and writes all outputs next to it.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{
    parse_override, resolve, Arch, BenchSection, DataSection, EvalSection, PathsSection, Resolved, RunConfig,
    SampleSection, Source, TokenizerSection,
};

use crate::bench_eval::{
    compare_drift, measure_scaling, plot_loglog, quality_over_time, train_feature_extractor, FeatureExtractor,
    ScalingReport, Series,
};
use crate::checkpoint::load_checkpoint;
use crate::data::{build_corpus, CorpusManifest, Split, VideoTensor};
use crate::error::{MebtError, Result};
use crate::export::{save_frame_grid, save_gif};
use crate::model::{ArModel, MebtModel, ModelConfig, AR_CHECKPOINT_KIND, CHECKPOINT_KIND};
use crate::sampler::{generate, sample_ar, DecodeConfig};
use crate::tensor_io::{read_tensor, write_tensor};
use crate::tokenizer::{codebook_usage, train_tokenizer, Tokenizer};
use crate::trainer::{held_out_nll, tokenize_corpus, train_ar, train_mebt};

pub const RUN_DIR_ENV: &str = "MEBT_RUN_DIR";

#[derive(Parser, Debug)]
#[command(name = "mebt", version, about = "Latent-bottleneck masked video transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set decode.S=16`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for the command's own random stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpus generation.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    Tokenizer {
        #[command(subcommand)]
        action: TrainAction,
    },
    /// MeBT or autoregressive baseline training (see `arch`).
    Model {
        #[command(subcommand)]
        action: TrainAction,
    },
    /// Generate token grids and, with a tokenizer, videos.
    Sample(Common),
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
}

#[derive(Subcommand, Debug)]
enum DataAction {
    Build(Common),
}

#[derive(Subcommand, Debug)]
enum TrainAction {
    Train(Common),
}

#[derive(Subcommand, Debug)]
enum BenchAction {
    /// Memory, time and attention-entry scaling against token count.
    Scaling(Common),
}

#[derive(Subcommand, Debug)]
enum EvalAction {
    /// Per-window feature distance of sampled videos to held-out videos.
    Quality(Common),
    /// MeBT against the AR baseline: drift of quality over time.
    Drift(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    DataBuild,
    TokenizerTrain,
    ModelTrain,
    Sample,
    BenchScaling,
    EvalQuality,
    EvalDrift,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::DataBuild => "data-build",
            Task::TokenizerTrain => "tokenizer-train",
            Task::ModelTrain => "model-train",
            Task::Sample => "sample",
            Task::BenchScaling => "bench-scaling",
            Task::EvalQuality => "eval-quality",
            Task::EvalDrift => "eval-drift",
        }
    }

    /// Config key that `--seed` writes.
    pub fn seed_key(self) -> &'static str {
        match self {
            Task::DataBuild => "data.seed",
            Task::TokenizerTrain => "tokenizer.train.seed",
            Task::ModelTrain => "train.seed",
            Task::Sample | Task::EvalDrift => "decode.seed",
            Task::BenchScaling => "bench.seed",
            Task::EvalQuality => "eval.features.seed",
        }
    }
}

fn exit_code(e: &MebtError) -> i32 {
    match e {
        MebtError::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (task, common) = match cli.command {
        Command::Data {
            action: DataAction::Build(c),
        } => (Task::DataBuild, c),
        Command::Tokenizer {
            action: TrainAction::Train(c),
        } => (Task::TokenizerTrain, c),
        Command::Model {
            action: TrainAction::Train(c),
        } => (Task::ModelTrain, c),
        Command::Sample(c) => (Task::Sample, c),
        Command::Bench {
            action: BenchAction::Scaling(c),
        } => (Task::BenchScaling, c),
        Command::Eval {
            action: EvalAction::Quality(c),
        } => (Task::EvalQuality, c),
        Command::Eval {
            action: EvalAction::Drift(c),
        } => (Task::EvalDrift, c),
    };
    let resolved = match resolve(
        common.config.as_deref(),
        &common.sets,
        common.seed.map(|s| (task.seed_key(), s)),
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let root = std::env::var_os(RUN_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    match run_in(&root, task, &resolved) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Creates the next free `<root>/<task>-NNN`, snapshots the config and
/// runs the task there. Returns the run directory.
pub fn run_in(root: &Path, task: Task, resolved: &Resolved) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| MebtError::io(root, e))?;
    let dir = (0..)
        .map(|k| root.join(format!("{}-{k:03}", task.name())))
        .find(|d| !d.exists())
        .expect("unbounded search");
    std::fs::create_dir(&dir).map_err(|e| MebtError::io(&dir, e))?;
    write_json(&dir.join("config.json"), &resolved.config)?;
    write_json(&dir.join("provenance.json"), &resolved.provenance)?;
    let cfg = &resolved.config;
    match task {
        Task::DataBuild => data_build(cfg, &dir),
        Task::TokenizerTrain => tokenizer_train(cfg, &dir),
        Task::ModelTrain => model_train(cfg, &dir),
        Task::Sample => sample(cfg, &dir),
        Task::BenchScaling => bench_scaling(cfg, &dir),
        Task::EvalQuality => eval_quality(cfg, &dir),
        Task::EvalDrift => eval_drift(cfg, &dir),
    }?;
    Ok(dir)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| MebtError::io(path, e))
}

/// JSON-lines sink that remembers its first write error.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| MebtError::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
            failed: None,
        })
    }

    fn push<T: Serialize>(&mut self, record: &T) {
        if self.failed.is_none() {
            let line = serde_json::to_string(record).expect("records serialize");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.failed = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(MebtError::io(&self.path, e));
        }
        self.out.flush().map_err(|e| MebtError::io(&self.path, e))
    }
}

fn need<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| MebtError::config(format!("paths.{key} is not set")))?;
    if !p.exists() {
        return Err(MebtError::config(format!(
            "paths.{key} = {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn data_build(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let d = &cfg.data;
    let train = build_corpus(&d.scene, d.count, &d.lengths, dir.join("corpus"), d.seed, Split::Train)?;
    // held-out entry seeds start far past the training range
    let held = build_corpus(
        &d.scene,
        d.held_out,
        &d.lengths,
        dir.join("held_out"),
        d.seed.wrapping_add(1 << 32),
        Split::Val,
    )?;
    eprintln!(
        "wrote {} training and {} held-out videos",
        train.entries.len(),
        held.entries.len()
    );
    Ok(())
}

fn tokenizer_train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let manifest = CorpusManifest::load(need(&cfg.paths.corpus, "corpus")?)?;
    let mut log = JsonLines::create(dir.join("metrics.jsonl"))?;
    let (mut first, mut last) = (None, None);
    let tok = train_tokenizer(&manifest, cfg.tokenizer.model.clone(), &cfg.tokenizer.train, |r| {
        log.push(r);
        first.get_or_insert(r.recon);
        last = Some(r.recon);
        if r.step % 100 == 0 {
            eprintln!("step {} recon {:.5} codes {}", r.step, r.recon, r.codes_used);
        }
    })?;
    log.finish()?;
    let path = dir.join("tokenizer.ckpt");
    tok.save(&path, cfg.tokenizer.train.steps as u64, cfg.tokenizer.train.seed)?;
    let videos = manifest.load_all()?;
    let mse = videos.iter().map(|v| tok.reconstruction_mse(v)).sum::<Result<f64>>()? / videos.len() as f64;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "first_step_recon": first,
            "last_step_recon": last,
            "corpus_recon_mse": mse,
            "codes_used": codebook_usage(&tok, &videos)?,
        }),
    )
}

fn model_train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let manifest = CorpusManifest::load(need(&cfg.paths.corpus, "corpus")?)?;
    let tok = Tokenizer::load(need(&cfg.paths.tokenizer, "tokenizer")?)?;
    let grids = tokenize_corpus(&manifest, &tok, Some(&dir.join("tokens")))?;
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| MebtError::io(&ckpt, e))?;
    let mut log = JsonLines::create(dir.join("metrics.jsonl"))?;
    let mut last = f64::NAN;
    let every = (cfg.train.steps / 20).max(1);
    let mut on_step = |r: &crate::trainer::MetricRecord| {
        log.push(r);
        last = r.loss;
        if r.step.is_multiple_of(every) {
            eprintln!("step {} loss {:.4} v {} n_mask {}", r.step, r.loss, r.v, r.n_mask);
        }
    };
    let mut summary = serde_json::Map::new();
    match cfg.arch {
        Arch::Mebt => {
            let model = train_mebt(&grids, &cfg.model, &cfg.train, Some(&ckpt), &mut on_step)?;
            summary.insert("params".into(), model.num_params().into());
            if let Some(held) = cfg.paths.held_out.as_ref() {
                let held = CorpusManifest::load(held)?;
                let hg = tokenize_corpus(&held, &tok, Some(&dir.join("held_out_tokens")))?;
                let nll = held_out_nll(&model, &hg, cfg.train.gamma, cfg.eval.nll_draws, cfg.train.seed)?;
                summary.insert("held_out_nll".into(), nll.into());
            }
        }
        Arch::Ar => {
            let model = train_ar(&grids, &cfg.model, &cfg.train, Some(&ckpt), &mut on_step)?;
            summary.insert("params".into(), model.store.num_scalars().into());
        }
    }
    log.finish()?;
    summary.insert("final_loss".into(), last.into());
    write_json(&dir.join("summary.json"), &summary)
}

enum Loaded {
    Mebt(MebtModel),
    Ar(ArModel),
}

fn load_any_model(path: &Path) -> Result<Loaded> {
    let (header, _) = load_checkpoint(path)?;
    match header.kind.as_str() {
        CHECKPOINT_KIND => MebtModel::load(path).map(Loaded::Mebt),
        AR_CHECKPOINT_KIND => ArModel::load(path).map(Loaded::Ar),
        other => Err(MebtError::config(format!(
            "{} holds a `{other}` checkpoint, not a model",
            path.display()
        ))),
    }
}

fn sample(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_any_model(need(&cfg.paths.model, "model")?)?;
    let tok = match &cfg.paths.tokenizer {
        Some(_) => Some(Tokenizer::load(need(&cfg.paths.tokenizer, "tokenizer")?)?),
        None => None,
    };
    let out = dir.join("samples");
    std::fs::create_dir_all(&out).map_err(|e| MebtError::io(&out, e))?;
    let mut forwards = Vec::with_capacity(cfg.sample.count);
    for i in 0..cfg.sample.count {
        let seed = cfg.decode.seed.wrapping_add(i as u64);
        let decoded = match &model {
            Loaded::Mebt(m) => generate(
                m,
                &DecodeConfig {
                    seed,
                    ..cfg.decode.clone()
                },
            )?,
            Loaded::Ar(m) => sample_ar(m, cfg.decode.top_k, seed)?,
        };
        forwards.push(decoded.forwards);
        write_tensor(out.join(format!("tokens_{i:03}.mbt")), &decoded.tokens.to_array())?;
        if let Some(tok) = &tok {
            let video = tok.decode_tokens(&decoded.tokens)?;
            write_tensor(out.join(format!("video_{i:03}.mbt")), &video.to_array())?;
            save_frame_grid(&video, cfg.sample.png_columns, out.join(format!("frames_{i:03}.png")))?;
            save_gif(&video, cfg.sample.gif_zoom, out.join(format!("video_{i:03}.gif")))?;
        }
    }
    let kind = match model {
        Loaded::Mebt(_) => CHECKPOINT_KIND,
        Loaded::Ar(_) => AR_CHECKPOINT_KIND,
    };
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "kind": kind, "forwards": forwards }),
    )
}

fn bench_scaling(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let b = &cfg.bench;
    let (fh, fw) = b.frame;
    let mut reports: Vec<ScalingReport> = Vec::new();
    for &backend in &b.backends {
        let factory = |tokens: usize| {
            MebtModel::new(
                ModelConfig {
                    num_layers: b.num_layers,
                    num_heads: b.num_heads,
                    d_model: b.d_model,
                    n_latent: b.n_latent,
                    grid: (tokens / (fh * fw), fh, fw),
                    vocab: cfg.model.vocab,
                    dropout: 0.0,
                    backend,
                    window: cfg.model.window,
                },
                b.seed,
            )
        };
        let report = measure_scaling(factory, backend, &b.lengths, b.batch, b.memory_budget)?;
        eprintln!("{}: {:?}", backend.name(), report.slopes);
        reports.push(report);
    }
    write_json(&dir.join("scaling.json"), &reports)?;
    // allocator peaks when available, tape bytes otherwise
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            label: r.backend.name(),
            points: r
                .records
                .iter()
                .filter(|x| x.failure.is_none())
                .map(|x| (x.tokens as f64, x.peak_bytes.unwrap_or(x.tape_bytes) as f64))
                .collect(),
        })
        .collect();
    plot_loglog(&series, dir.join("scaling.png"))
}

fn features_for(cfg: &RunConfig, dir: &Path, held: &CorpusManifest) -> Result<FeatureExtractor> {
    if cfg.paths.features.is_some() {
        return FeatureExtractor::load(need(&cfg.paths.features, "features")?);
    }
    let train = CorpusManifest::load(need(&cfg.paths.corpus, "corpus")?)?;
    let fe = train_feature_extractor(&train, held, &cfg.eval.features, |w| eprintln!("warning: {w}"))?;
    fe.save(
        dir.join("features.ckpt"),
        cfg.eval.features.steps as u64,
        cfg.eval.features.seed,
    )?;
    Ok(fe)
}

fn sample_videos(path: &Path) -> Result<Vec<VideoTensor>> {
    let dir = if path.join("samples").is_dir() {
        path.join("samples")
    } else {
        path.to_path_buf()
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| MebtError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("video_") && n.ends_with(".mbt"))
        })
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(MebtError::config(format!(
            "{} holds fewer than two decoded videos",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| VideoTensor::from_array(&read_tensor(p)?))
        .collect()
}

fn eval_quality(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let held = CorpusManifest::load(need(&cfg.paths.held_out, "held_out")?)?;
    let videos = sample_videos(need(&cfg.paths.samples, "samples")?)?;
    let fe = features_for(cfg, dir, &held)?;
    let curve = quality_over_time(&videos, &fe, cfg.eval.window, cfg.eval.stride, &held.load_all()?)?;
    write_json(
        &dir.join("quality.json"),
        &serde_json::json!({ "accuracy": fe.accuracy, "curve": curve }),
    )
}

fn eval_drift(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let held = CorpusManifest::load(need(&cfg.paths.held_out, "held_out")?)?;
    let mebt = MebtModel::load(need(&cfg.paths.model, "model")?)?;
    let ar = ArModel::load(need(&cfg.paths.ar_model, "ar_model")?)?;
    let tok = Tokenizer::load(need(&cfg.paths.tokenizer, "tokenizer")?)?;
    let fe = features_for(cfg, dir, &held)?;
    if cfg.eval.window != fe.config.window {
        return Err(MebtError::config(format!(
            "eval.window must equal the extractor window {}",
            fe.config.window
        )));
    }
    let report = compare_drift(
        &mebt,
        &ar,
        &tok,
        &fe,
        &held.load_all()?,
        &cfg.decode,
        cfg.eval.samples,
        cfg.eval.stride,
    )?;
    let (m, a) = report.final_delta();
    eprintln!("final-window delta: mebt {m:.4}, ar {a:.4}");
    write_json(
        &dir.join("drift.json"),
        &serde_json::json!({ "accuracy": fe.accuracy, "report": report }),
    )
}
