//! Trains a small bottleneck transformer on tokenized videos, samples
//! with iterative decoding plus revision and writes the decoded video.
//!
//! cargo run --release --example train_and_sample -- [steps] [samples]

use std::path::Path;

use mebt::data::{build_corpus, SceneSpec, Split};
use mebt::export::{save_frame_grid, save_gif};
use mebt::model::{Backend, ModelConfig};
use mebt::sampler::{generate, DecodeConfig};
use mebt::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerTrainConfig};
use mebt::trainer::{tokenize_corpus, train_mebt, TrainConfig};

fn main() -> mebt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let samples = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let work = std::env::temp_dir().join("mebt-sample");
    let train = build_corpus(&SceneSpec::default(), 32, &[64], work.join("train"), 0, Split::Train)?;
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
    let grids = tokenize_corpus(&train, &tok, Some(work.join("tokens").as_path()))?;

    let model = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 32,
        n_latent: 16,
        grid: (grids[0].t, grids[0].h, grids[0].w),
        vocab: tok.config.codebook_size,
        dropout: 0.0,
        backend: Backend::Mebt,
        window: 16,
    };
    let cfg = TrainConfig {
        steps,
        ..Default::default()
    };
    let m = train_mebt(&grids, &model, &cfg, Some(work.join("checkpoints").as_path()), |r| {
        if r.step % 200 == 0 {
            println!(
                "step {:5}  loss {:.4}  v {:2}  masked {}",
                r.step, r.loss, r.v, r.n_mask
            );
        }
    })?;
    println!("{} parameters", m.num_params());

    for i in 0..samples {
        let out = generate(
            &m,
            &DecodeConfig {
                seed: i as u64,
                ..Default::default()
            },
        )?;
        let video = tok.decode_tokens(&out.tokens)?;
        save_frame_grid(&video, 16, work.join(format!("sample_{i}.png")))?;
        save_gif(&video, 4, work.join(format!("sample_{i}.gif")))?;
        println!("sample {i}: {} forwards for {} tokens", out.forwards, out.tokens.len());
    }
    println!("outputs in {}", work.display());
    Ok(())
}
