//! Trains the sprite feature extractor, then scores per-window Frechet
//! distance of clean videos and of videos with a frozen second half
//! against a held-out reference.
//!
//! cargo run --release --example feature_quality -- [steps]

use mebt::bench_eval::{quality_over_time, train_feature_extractor, FeatureTrainConfig};
use mebt::data::{build_corpus, SceneSpec, Split, VideoTensor};

fn freeze_after(v: &VideoTensor, t0: usize) -> VideoTensor {
    let mut out = v.clone();
    let frame = v.frame_len();
    let held = v.data[(t0 - 1) * frame..t0 * frame].to_vec();
    for t in t0..v.frames {
        out.data[t * frame..(t + 1) * frame].copy_from_slice(&held);
    }
    out
}

fn main() -> mebt::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let work = std::env::temp_dir().join("mebt-quality");
    let scene = SceneSpec::default();
    let train = build_corpus(&scene, 16, &[64], work.join("train"), 0, Split::Train)?;
    let held = build_corpus(&scene, 32, &[64], work.join("held"), 1 << 32, Split::Val)?;
    let probe = build_corpus(&scene, 32, &[64], work.join("probe"), 1 << 40, Split::Val)?;

    let cfg = FeatureTrainConfig {
        steps,
        ..Default::default()
    };
    let fe = train_feature_extractor(&train, &held, &cfg, |w| eprintln!("warning: {w}"))?;
    println!("held-out accuracy (color, quadrant): {:?}", fe.accuracy);

    let reference = held.load_all()?;
    let clean = probe.load_all()?;
    let frozen: Vec<VideoTensor> = clean.iter().map(|v| freeze_after(v, 32)).collect();
    for (name, videos) in [("clean", &clean), ("frozen", &frozen)] {
        let q = quality_over_time(videos, &fe, 16, 8, &reference)?;
        let d: Vec<String> = q.distance.iter().map(|d| format!("{d:.1}")).collect();
        println!("{name:>6}: {}", d.join(" "));
    }
    Ok(())
}
