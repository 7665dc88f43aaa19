//! Gaussian interval curriculum against whole-video training at matched
//! steps, scored by held-out masked NLL on whole videos.
//!
//! cargo run --release --example curriculum_ablation -- [steps] [seeds] [alpha]

use std::path::Path;

use mebt::data::{build_corpus, SceneSpec, Split};
use mebt::model::{Backend, ModelConfig};
use mebt::schedules::{Curriculum, GammaKind};
use mebt::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerTrainConfig};
use mebt::trainer::{held_out_nll, tokenize_corpus, train_mebt, TrainConfig};

fn main() -> mebt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, seeds, alpha) = (arg(0, 1500.0) as usize, arg(1, 5.0) as u64, arg(2, 50.0));
    let work = std::env::temp_dir().join("mebt-curriculum");
    let scene = SceneSpec::default();
    let train = build_corpus(&scene, 32, &[64], work.join("train"), 0, Split::Train)?;
    let held = build_corpus(&scene, 8, &[64], work.join("held"), 1 << 32, Split::Val)?;
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
    let grids = tokenize_corpus(&train, &tok, None)?;
    let held_grids = tokenize_corpus(&held, &tok, None)?;
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
        let mut nll = [0.0; 2];
        for (k, curriculum) in [Curriculum::Gaussian, Curriculum::None].into_iter().enumerate() {
            let cfg = TrainConfig {
                steps,
                curriculum,
                alpha,
                seed,
                ..Default::default()
            };
            let m = train_mebt(&grids, &model, &cfg, None, |_| {})?;
            nll[k] = held_out_nll(&m, &held_grids, GammaKind::Cosine, 8, 99)?;
        }
        wins += usize::from(nll[0] <= nll[1]);
        println!("seed {seed}: gaussian {:.4}  none {:.4}", nll[0], nll[1]);
    }
    println!("gaussian <= none in {wins} of {seeds} seeds");
    Ok(())
}
