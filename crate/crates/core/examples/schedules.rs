//! The interval curriculum and the decoding quota, printed as tables, plus
//! a decode of a fixed-logit stub showing the forward-count contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mebt::sampler::{generate, DecodeConfig, TablePredictor};
use mebt::schedules::{sample_interval, tokens_decoded_after, GammaKind, IntervalSchedule};

fn main() -> mebt::Result<()> {
    let sched = IntervalSchedule::new(40.0, 2.0, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("step  mean v  sampled v (8 draws)");
    for n in [0u64, 100, 200, 400, 600, 1000] {
        let draws: Vec<usize> = (0..8).map(|_| sample_interval(n, &sched, &mut rng)).collect();
        println!("{n:4}  {:6.1}  {draws:?}", sched.mean(n));
    }

    let (s_total, n) = (8, 64);
    for gamma in [GammaKind::Cosine, GammaKind::Linear] {
        let quota = (0..s_total)
            .map(|s| tokens_decoded_after(s, s_total, n, gamma))
            .collect::<mebt::Result<Vec<_>>>()?;
        println!("{gamma:?} context after each of {s_total} steps, N = {n}: {quota:?}");
    }

    let stub = TablePredictor::position_independent((4, 4, 4), vec![0.5, 1.0, -0.5, 0.0]);
    let cfg = DecodeConfig {
        steps: 8,
        partitions: 2,
        revision_repeats: 2,
        ..Default::default()
    };
    let out = generate(&stub, &cfg)?;
    println!(
        "stub decode: {} forwards (S + N_R * R = {}) for {} tokens",
        out.forwards,
        8 + 2 * 2,
        out.tokens.len()
    );
    Ok(())
}
