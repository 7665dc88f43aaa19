//! Quality drift over time: MeBT iterative decoding against the raster
//! autoregressive baseline at matched size and training steps.
//!
//! cargo run --release --example drift_vs_ar -- [steps] [seeds] [samples]

use std::path::Path;

use mebt::bench_eval::{compare_drift, train_feature_extractor, FeatureTrainConfig};
use mebt::data::{build_corpus, SceneSpec, Split};
use mebt::model::{Backend, ModelConfig};
use mebt::sampler::DecodeConfig;
use mebt::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerTrainConfig};
use mebt::trainer::{tokenize_corpus, train_ar, train_mebt, TrainConfig};

fn main() -> mebt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, seeds, samples) = (arg(0, 1000), arg(1, 5) as u64, arg(2, 16));
    let work = std::env::temp_dir().join("mebt-drift");
    let scene = SceneSpec::default();
    let train = build_corpus(&scene, 32, &[64], work.join("train"), 0, Split::Train)?;
    let held = build_corpus(&scene, 64, &[64], work.join("held"), 1 << 32, Split::Val)?;
    let tok_path = work.join("tokenizer.ckpt");
    let tok = if Path::new(&tok_path).exists() {
        Tokenizer::load(&tok_path)?
    } else {
        let t = train_tokenizer(
            &train,
            TokenizerConfig::default(),
            &TokenizerTrainConfig::default(),
            |_| {},
        )?;
        t.save(&tok_path, 0, 0)?;
        t
    };
    let fe = train_feature_extractor(&train, &held, &FeatureTrainConfig::default(), |w| {
        eprintln!("warning: {w}")
    })?;
    println!("feature accuracy {:?}", fe.accuracy);
    let grids = tokenize_corpus(&train, &tok, None)?;
    let reference = held.load_all()?;
    let model = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 32,
        n_latent: 16,
        grid: (16, 4, 4),
        vocab: 64,
        dropout: 0.0,
        backend: Backend::Mebt,
        window: 16,
    };
    let mut wins = 0;
    for seed in 0..seeds {
        let cfg = TrainConfig {
            steps,
            seed,
            ..Default::default()
        };
        let m = train_mebt(&grids, &model, &cfg, None, |_| {})?;
        let a = train_ar(&grids, &model, &cfg, None, |_| {})?;
        let decode = DecodeConfig {
            seed: 1000 * seed,
            ..Default::default()
        };
        let r = compare_drift(&m, &a, &tok, &fe, &reference, &decode, samples, 8)?;
        let (dm, da) = r.final_delta();
        wins += usize::from(dm <= da);
        println!(
            "seed {seed}: mebt delta {dm:.3} {:?}",
            r.mebt.distance.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>()
        );
        println!(
            "        ar delta {da:.3} {:?}",
            r.ar.distance.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>()
        );
        println!("        forwards mebt {} ar {}", r.mebt_forwards[0], r.ar_forwards[0]);
    }
    println!("mebt final-window delta <= ar in {wins} of {seeds} seeds");
    Ok(())
}
