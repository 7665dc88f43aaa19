//! Forward+backward memory and time against token count.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alloc;
use crate::error::{MebtError, Result};
use crate::model::{count_attention_cost, Backend, MaskedBatch, MebtModel};
use crate::nn::Fwd;
use crate::schedules::sample_mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub tokens: usize,
    pub n_context: usize,
    pub n_masked: usize,
    /// Peak heap growth during the step, when the counting allocator is
    /// installed.
    pub peak_bytes: Option<u64>,
    /// Values held on the autograd tape after the forward pass.
    pub tape_bytes: u64,
    pub wall_ms: f64,
    /// Score entries seen by the instrumented forward.
    pub score_entries: u64,
    /// Score entries from the analytic counter.
    pub counted_entries: u64,
    /// Why this length was skipped, e.g. the memory budget.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub peak_bytes: Option<f64>,
    pub tape_bytes: Option<f64>,
    pub wall_ms: Option<f64>,
    pub score_entries: Option<f64>,
    pub counted_entries: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub backend: Backend,
    pub batch: usize,
    pub records: Vec<ScalingRecord>,
    pub slopes: Slopes,
}

/// Least-squares slope of `log2 y` against `log2 x`; `None` with fewer
/// than two points or a non-positive value.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.log2(), y.log2())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn half_masked_batch(model: &MebtModel, tokens: usize, rng: &mut ChaCha8Rng) -> Result<MaskedBatch> {
    let cfg = &model.config;
    if tokens != cfg.n_max() {
        return Err(MebtError::config(format!(
            "factory built a model for {} tokens, wanted {tokens}",
            cfg.n_max()
        )));
    }
    let masked = sample_mask(tokens, 0.5, rng)?;
    let mut context = Vec::with_capacity(tokens - masked.len());
    let mut k = 0;
    for p in 0..tokens {
        if k < masked.len() && masked[k] == p {
            k += 1;
        } else {
            context.push((p, rng.random_range(0..cfg.vocab) as u16));
        }
    }
    let targets = masked.iter().map(|_| rng.random_range(0..cfg.vocab) as u16).collect();
    MaskedBatch::new(context, masked, targets, (0, cfg.grid.0), cfg.frame_tokens())
}

/// One forward+backward of the masked objective over `batch` instances
/// per length. `model_factory(tokens)` must return a model whose grid has
/// exactly `tokens` positions. Lengths whose analytic activation estimate
/// exceeds `memory_budget` bytes are recorded as failures and skipped.
pub fn measure_scaling(
    mut model_factory: impl FnMut(usize) -> Result<MebtModel>,
    backend: Backend,
    lengths: &[usize],
    batch: usize,
    memory_budget: Option<u64>,
) -> Result<ScalingReport> {
    if batch == 0 {
        return Err(MebtError::config("batch must be positive"));
    }
    let mut records = Vec::with_capacity(lengths.len());
    for &tokens in lengths {
        let model = model_factory(tokens)?;
        if model.config.backend != backend {
            return Err(MebtError::config("factory built a model for another backend"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tokens as u64);
        let batches = (0..batch)
            .map(|_| half_masked_batch(&model, tokens, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (nc, nm) = (batches[0].n_context(), batches[0].n_masked());
        let cost = count_attention_cost(&model.config, nc, nm, model.config.grid);
        let counted = match backend {
            Backend::Mebt => cost.mebt,
            Backend::Full => cost.full,
            Backend::Axial => cost.axial,
            Backend::Window => cost.window,
        };
        // forward values, gradients and transient buffers, all f64
        let estimate = counted.activations * 8 * 3 * batch as u64;
        if let Some(limit) = memory_budget.filter(|&l| estimate > l) {
            records.push(ScalingRecord {
                tokens,
                n_context: nc,
                n_masked: nm,
                peak_bytes: None,
                tape_bytes: 0,
                wall_ms: 0.0,
                score_entries: 0,
                counted_entries: counted.score_entries * batch as u64,
                failure: Some(format!("estimated {estimate} bytes exceeds the {limit}-byte budget")),
            });
            continue;
        }
        let started = Instant::now();
        let base = alloc::current_bytes();
        alloc::reset_peak();
        let (tape_bytes, score_entries) = {
            let mut fx = Fwd::eval(&model.store);
            let mut losses = Vec::with_capacity(batch);
            for b in &batches {
                let logits = model.forward(&mut fx, b)?;
                let ids = Rc::new(b.targets.iter().map(|&t| t as usize).collect());
                losses.push((fx.tape.cross_entropy(logits, ids), 1.0 / batch as f64));
            }
            let loss = fx.tape.weighted_sum(&losses);
            let tape_bytes = fx.tape.activation_bytes() as u64;
            let entries = fx.score_entries();
            let grads = fx.tape.backward(loss, &model.store);
            drop(grads);
            (tape_bytes, entries)
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let peak = alloc::allocator_active().then(|| alloc::peak_bytes().saturating_sub(base) as u64);
        records.push(ScalingRecord {
            tokens,
            n_context: nc,
            n_masked: nm,
            peak_bytes: peak,
            tape_bytes,
            wall_ms,
            score_entries,
            counted_entries: counted.score_entries * batch as u64,
            failure: None,
        });
    }
    let ok: Vec<&ScalingRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let fit = |f: &dyn Fn(&ScalingRecord) -> Option<f64>| {
        let pts: Option<Vec<(f64, f64)>> = ok.iter().map(|r| f(r).map(|y| (r.tokens as f64, y))).collect();
        pts.and_then(|p| loglog_slope(&p))
    };
    let slopes = Slopes {
        peak_bytes: fit(&|r| r.peak_bytes.map(|b| b as f64)),
        tape_bytes: fit(&|r| Some(r.tape_bytes as f64)),
        wall_ms: fit(&|r| Some(r.wall_ms)),
        score_entries: fit(&|r| Some(r.score_entries as f64)),
        counted_entries: fit(&|r| Some(r.counted_entries as f64)),
    };
    Ok(ScalingReport {
        backend,
        batch,
        records,
        slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = [512.0, 1024.0, 2048.0, 4096.0]
            .iter()
            .map(|&x| (x, 3.0 * x * x))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
        assert!(loglog_slope(&[(1.0, 0.0), (2.0, 1.0)]).is_none());
    }

    fn factory(backend: Backend) -> impl FnMut(usize) -> Result<MebtModel> {
        move |tokens| {
            MebtModel::new(
                ModelConfig {
                    num_layers: 2,
                    num_heads: 1,
                    d_model: 8,
                    n_latent: 4,
                    grid: (tokens / 16, 4, 4),
                    vocab: 8,
                    dropout: 0.0,
                    backend,
                    window: 16,
                },
                0,
            )
        }
    }

    #[test]
    fn instrumented_counts_match_the_counter() {
        for backend in [Backend::Mebt, Backend::Full] {
            let r = measure_scaling(factory(backend), backend, &[64, 128, 256], 2, None).unwrap();
            for rec in &r.records {
                assert_eq!(rec.score_entries, rec.counted_entries);
                assert!(rec.tape_bytes > 0);
            }
        }
    }

    #[test]
    fn budget_failures_are_recorded_and_skipped() {
        let r = measure_scaling(factory(Backend::Full), Backend::Full, &[64, 1024], 1, Some(4_000_000)).unwrap();
        assert!(r.records[0].failure.is_none());
        assert!(r.records[1].failure.is_some());
        assert!(r.slopes.score_entries.is_none());
    }
}
