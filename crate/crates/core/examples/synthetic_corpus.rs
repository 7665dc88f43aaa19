//! Builds a small moving-sprite corpus and writes the first video as a
//! PNG frame grid and an animated GIF.
//!
//! cargo run --release --example synthetic_corpus -- [count] [frames] [out_dir]

use std::path::PathBuf;

use mebt::data::{build_corpus, SceneSpec, Split};
use mebt::export::{save_frame_grid, save_gif};

fn main() -> mebt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let count = args.first().and_then(|s| s.parse().ok()).unwrap_or(8);
    let frames = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let out = args
        .get(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mebt-corpus"));

    let scene = SceneSpec::default();
    let manifest = build_corpus(&scene, count, &[frames], &out, 0, Split::Train)?;
    println!(
        "{} videos of {frames} frames in {}",
        manifest.entries.len(),
        out.display()
    );

    let video = manifest.load_video(0)?;
    let trace = manifest.trace(0)?;
    for (t, sprites) in trace.frames.iter().enumerate().take(4) {
        println!("frame {t}: {sprites:?}");
    }
    save_frame_grid(&video, 16, out.join("video_00000.png"))?;
    save_gif(&video, 4, out.join("video_00000.gif"))?;
    println!("wrote video_00000.png and video_00000.gif");
    Ok(())
}
