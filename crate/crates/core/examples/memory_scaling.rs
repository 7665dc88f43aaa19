//! Measured peak memory and wall time of one forward+backward pass against
//! token count, for the bottleneck and dense backends.
//!
//! cargo run --release --example memory_scaling -- [max_tokens]

use mebt::bench_eval::{measure_scaling, plot_loglog, CountingAlloc, Series};
use mebt::model::{Backend, MebtModel, ModelConfig};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> mebt::Result<()> {
    let max: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let lengths: Vec<usize> = [512, 1024, 2048, 4096, 8192]
        .into_iter()
        .filter(|&n| n <= max)
        .collect();
    let mut reports = Vec::new();
    for backend in [Backend::Mebt, Backend::Full, Backend::Axial, Backend::Window] {
        let factory = |tokens: usize| {
            MebtModel::new(
                ModelConfig {
                    num_layers: 2,
                    num_heads: 1,
                    d_model: 16,
                    n_latent: 32,
                    grid: (tokens / 64, 8, 8),
                    vocab: 64,
                    dropout: 0.0,
                    backend,
                    window: 16,
                },
                0,
            )
        };
        let r = measure_scaling(factory, backend, &lengths, 1, Some(3 << 30))?;
        for rec in &r.records {
            let peak = rec
                .peak_bytes
                .map(|b| format!("{:.1} MB", b as f64 / 1e6))
                .unwrap_or_else(|| "-".into());
            println!(
                "{:>6} {:>6}  peak {peak:>10}  {:8.1} ms",
                backend.name(),
                rec.tokens,
                rec.wall_ms
            );
        }
        println!("{:>6} slope {:?}", backend.name(), r.slopes.peak_bytes);
        reports.push(r);
    }
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            label: r.backend.name(),
            points: r
                .records
                .iter()
                .filter_map(|x| x.peak_bytes.map(|b| (x.tokens as f64, b as f64)))
                .collect(),
        })
        .collect();
    let path = std::env::temp_dir().join("mebt-scaling.png");
    plot_loglog(&series, &path)?;
    println!("plot in {}", path.display());
    Ok(())
}
