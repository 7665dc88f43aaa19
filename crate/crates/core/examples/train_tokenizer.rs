//! Trains the VQ tokenizer on a synthetic corpus, then reports held-out
//! reconstruction error and codebook usage.
//!
//! cargo run --release --example train_tokenizer -- [steps]

use mebt::data::{build_corpus, SceneSpec, Split};
use mebt::tokenizer::{codebook_usage, train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

fn main() -> mebt::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let work = std::env::temp_dir().join("mebt-tokenizer");
    let scene = SceneSpec::default();
    let train = build_corpus(&scene, 32, &[64], work.join("train"), 0, Split::Train)?;
    let held = build_corpus(&scene, 8, &[64], work.join("held"), 1 << 32, Split::Val)?;

    let cfg = TokenizerTrainConfig {
        steps,
        ..Default::default()
    };
    let tok = train_tokenizer(&train, TokenizerConfig::default(), &cfg, |r| {
        if r.step % 250 == 0 || r.step + 1 == steps {
            println!(
                "step {:5}  recon {:.5}  commit {:.5}  codes {}",
                r.step, r.recon, r.commit, r.codes_used
            );
        }
    })?;

    let videos = held.load_all()?;
    let mut mse = 0.0;
    for v in &videos {
        mse += tok.reconstruction_mse(v)? / videos.len() as f64;
    }
    let grid = tok.tokenize(&videos[0])?;
    println!("held-out mse {mse:.5}, {} codes in use", codebook_usage(&tok, &videos)?);
    println!(
        "token grid {}x{}x{} from a {}-frame video",
        grid.t, grid.h, grid.w, videos[0].frames
    );
    tok.save(work.join("tokenizer.ckpt"), steps as u64, cfg.seed)?;
    Ok(())
}
