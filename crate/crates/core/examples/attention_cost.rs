//! Counted attention-score entries for each backend as the token count
//! grows, with log-log slopes.

use mebt::bench_eval::loglog_slope;
use mebt::model::{count_attention_cost, Backend, ModelConfig};

fn main() {
    let lengths = [512usize, 1024, 2048, 4096, 8192];
    let mut rows = Vec::new();
    for &n in &lengths {
        let cfg = ModelConfig {
            num_layers: 4,
            num_heads: 4,
            d_model: 64,
            n_latent: 64,
            grid: (n / 64, 8, 8),
            vocab: 64,
            dropout: 0.0,
            backend: Backend::Mebt,
            window: 16,
        };
        rows.push((n, count_attention_cost(&cfg, n / 2, n / 2, cfg.grid)));
    }
    println!(
        "{:>6} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "tokens", "mebt", "full", "axial", "window", "local"
    );
    for (n, c) in &rows {
        println!(
            "{n:>6} {:>14} {:>14} {:>14} {:>14} {:>14}",
            c.mebt.score_entries,
            c.full.score_entries,
            c.axial.score_entries,
            c.window.score_entries,
            c.local.score_entries
        );
    }
    let slope = |f: fn(&mebt::model::CostReport) -> u64| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|(n, c)| (*n as f64, f(c) as f64)).collect();
        loglog_slope(&pts).unwrap_or(f64::NAN)
    };
    println!(
        "slopes: mebt {:.3}  full {:.3}  axial {:.3}  window {:.3}  local {:.3}",
        slope(|c| c.mebt.score_entries),
        slope(|c| c.full.score_entries),
        slope(|c| c.axial.score_entries),
        slope(|c| c.window.score_entries),
        slope(|c| c.local.score_entries)
    );
}
