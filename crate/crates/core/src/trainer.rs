//! Masked-token training under the interval curriculum, and the
//! autoregressive baseline objective.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Var};
use crate::data::CorpusManifest;
use crate::error::{MebtError, Result};
use crate::model::{ArModel, MaskedBatch, MebtModel, ModelConfig};
use crate::nn::Fwd;
use crate::optim::{AdamW, AdamWConfig};
use crate::schedules::{sample_mask, sample_mask_ratio, Curriculum, GammaKind, IntervalSchedule};
use crate::tensor_io::{read_tensor, write_tensor};
use crate::tokenizer::{TokenGrid, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Overrides the model's dropout rate when set.
    pub dropout: Option<f64>,
    pub curriculum: Curriculum,
    pub alpha: f64,
    pub beta_sched: f64,
    /// Schedule the training mask ratio is drawn from.
    pub gamma: GammaKind,
    pub clip_norm: f64,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr: 1e-3,
            steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            weight_decay: 0.01,
            dropout: None,
            curriculum: Curriculum::None,
            alpha: 30_000.0,
            beta_sched: 2.0,
            gamma: GammaKind::Cosine,
            clip_norm: 1.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(MebtError::config("batch must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(MebtError::config("lr and clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(MebtError::config("adam betas must lie in [0, 1)"));
        }
        if self.dropout.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return Err(MebtError::config("dropout must lie in [0, 1)"));
        }
        IntervalSchedule::new(self.alpha, self.beta_sched, 1).map(|_| ())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn schedule(&self, t_max: usize) -> Result<IntervalSchedule> {
        IntervalSchedule::new(self.alpha, self.beta_sched, t_max)
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub v: usize,
    pub r: f64,
    pub n_mask: usize,
    pub wall_ms: f64,
}

fn check_targets(fx: &Fwd, logits: Var, targets: &[u16]) -> Result<()> {
    let (rows, vocab) = fx.tape.shape(logits);
    if rows != targets.len() {
        return Err(MebtError::logic(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    if targets.iter().any(|&t| t as usize >= vocab) {
        return Err(MebtError::logic("target outside the vocabulary"));
    }
    Ok(())
}

/// Mean cross-entropy over the masked positions.
pub fn mebt_loss(fx: &mut Fwd, logits: Var, targets: &[u16]) -> Result<Var> {
    check_targets(fx, logits, targets)?;
    Ok(fx
        .tape
        .cross_entropy(logits, Rc::new(targets.iter().map(|&t| t as usize).collect())))
}

/// Mean next-token NLL of causal raster-order logits.
pub fn ar_loss(fx: &mut Fwd, logits: Var, targets: &[u16]) -> Result<Var> {
    mebt_loss(fx, logits, targets)
}

/// Leakage probe: changing token `j` must leave logits of rows `0..=j`
/// untouched, checked here for the last token and a middle token.
pub fn check_ar_causality(model: &ArModel, tokens: &[u16]) -> Result<()> {
    let run = |seq: &[u16]| -> Result<crate::tensor::Tensor> {
        let mut fx = Fwd::eval(&model.store);
        let l = model.forward(&mut fx, seq)?;
        Ok(fx.tape.value(l).clone())
    };
    let base = run(tokens)?;
    for j in [tokens.len() / 2, tokens.len() - 1] {
        let mut probe = tokens.to_vec();
        probe[j] = ((probe[j] as usize + 1) % model.config.vocab) as u16;
        let out = run(&probe)?;
        if (0..=j).any(|i| base.row(i) != out.row(i)) {
            return Err(MebtError::logic(format!("token {j} leaks into earlier logits")));
        }
    }
    Ok(())
}

/// Batch for a given interval length `v` and mask ratio `r`; the window
/// start is uniform and positions stay absolute.
pub fn make_training_batch_with<R: Rng + ?Sized>(
    tokens: &TokenGrid,
    v: usize,
    r: f64,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if v == 0 || v > tokens.t {
        return Err(MebtError::config(format!(
            "interval length {v} outside 1..={}",
            tokens.t
        )));
    }
    let ft = tokens.h * tokens.w;
    let start = rng.random_range(0..=tokens.t - v);
    let n = v * ft;
    let offset = start * ft;
    let mut masked = sample_mask(n, r, rng)?;
    masked.iter_mut().for_each(|p| *p += offset);
    let mut context = Vec::with_capacity(n - masked.len());
    let mut k = 0;
    for p in offset..offset + n {
        if k < masked.len() && masked[k] == p {
            k += 1;
        } else {
            context.push((p, tokens.indices[p]));
        }
    }
    let targets = masked.iter().map(|&p| tokens.indices[p]).collect();
    MaskedBatch::new(context, masked, targets, (start, v), ft)
}

/// Draws `v` from the curriculum at iteration `n` and `r` from the mask
/// schedule, then builds the batch.
pub fn make_training_batch<R: Rng + ?Sized>(
    tokens: &TokenGrid,
    n: u64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let sched = config.schedule(tokens.t)?;
    let v = config.curriculum.sample_length(n, &sched, rng);
    let r = sample_mask_ratio(config.gamma, tokens.len(), rng);
    make_training_batch_with(tokens, v, r, rng)
}

fn finish_step(
    store: &mut crate::autograd::ParamStore,
    opt: &mut AdamW,
    mut grads: Grads,
    loss: f64,
    config: &TrainConfig,
    step: usize,
) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(MebtError::NonFiniteLoss { step });
    }
    grads.scale(1.0 / config.batch as f64);
    grads.clip_global_norm(config.clip_norm);
    opt.step(store, &grads);
    Ok(())
}

fn check_grids(grids: &[TokenGrid], model: &ModelConfig) -> Result<()> {
    if grids.is_empty() {
        return Err(MebtError::config("no token grids to train on"));
    }
    for g in grids {
        if (g.t, g.h, g.w) != model.grid {
            return Err(MebtError::config(format!(
                "token grid {:?} does not match model grid {:?}",
                (g.t, g.h, g.w),
                model.grid
            )));
        }
        if g.vocab > model.vocab {
            return Err(MebtError::config("token vocabulary exceeds the model's"));
        }
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Trains a fresh model on cached token grids. `log` sees every step's
/// record; checkpoints go to `ckpt_dir` (periodic plus `final.ckpt`).
pub fn train_mebt(
    grids: &[TokenGrid],
    model_config: &ModelConfig,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut log: impl FnMut(&MetricRecord),
) -> Result<MebtModel> {
    config.validate()?;
    check_grids(grids, model_config)?;
    let mut model = MebtModel::new(model_config.clone(), config.seed)?;
    let mut opt = AdamW::new(&model.store, config.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d65_6274);
    let sched = config.schedule(model_config.grid.0)?;
    let dropout = config.dropout.unwrap_or(model_config.dropout);
    for step in 0..config.steps {
        let started = Instant::now();
        let v = config.curriculum.sample_length(step as u64, &sched, &mut rng);
        let r = sample_mask_ratio(config.gamma, model_config.n_max(), &mut rng);
        let mut grads = Grads::zeros_like(&model.store);
        let (mut loss, mut n_mask) = (0.0, 0);
        for b in 0..config.batch {
            let grid = &grids[rng.random_range(0..grids.len())];
            let batch = make_training_batch_with(grid, v, r, &mut rng)?;
            n_mask += batch.n_masked();
            let mut fx = Fwd::train(&model.store, dropout, dropout_seed(config.seed, step, b));
            let logits = model.forward(&mut fx, &batch)?;
            let l = mebt_loss(&mut fx, logits, &batch.targets)?;
            loss += fx.tape.value(l).scalar_value() / config.batch as f64;
            grads.accumulate(fx.tape.backward(l, &model.store));
        }
        finish_step(&mut model.store, &mut opt, grads, loss, config, step)?;
        log(&MetricRecord {
            step,
            loss,
            v,
            r,
            n_mask: n_mask / config.batch,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = ckpt_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                model.save(checkpoint_path(dir, step + 1), (step + 1) as u64, config.seed)?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        model.save(dir.join("final.ckpt"), config.steps as u64, config.seed)?;
    }
    Ok(model)
}

/// Trains the autoregressive baseline on whole token grids.
pub fn train_ar(
    grids: &[TokenGrid],
    model_config: &ModelConfig,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut log: impl FnMut(&MetricRecord),
) -> Result<ArModel> {
    config.validate()?;
    check_grids(grids, model_config)?;
    let mut model = ArModel::new(model_config.clone(), config.seed)?;
    let mut opt = AdamW::new(&model.store, config.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6172);
    let dropout = config.dropout.unwrap_or(model_config.dropout);
    for step in 0..config.steps {
        let started = Instant::now();
        let mut grads = Grads::zeros_like(&model.store);
        let mut loss = 0.0;
        for b in 0..config.batch {
            let grid = &grids[rng.random_range(0..grids.len())];
            let mut fx = Fwd::train(&model.store, dropout, dropout_seed(config.seed, step, b));
            let logits = model.forward(&mut fx, &grid.indices)?;
            let l = ar_loss(&mut fx, logits, &grid.indices)?;
            loss += fx.tape.value(l).scalar_value() / config.batch as f64;
            grads.accumulate(fx.tape.backward(l, &model.store));
        }
        finish_step(&mut model.store, &mut opt, grads, loss, config, step)?;
        log(&MetricRecord {
            step,
            loss,
            v: model_config.grid.0,
            r: 1.0,
            n_mask: model_config.n_max(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = ckpt_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                model.save(checkpoint_path(dir, step + 1), (step + 1) as u64, config.seed)?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        model.save(dir.join("final.ckpt"), config.steps as u64, config.seed)?;
    }
    Ok(model)
}

fn dropout_seed(seed: u64, step: usize, item: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 16) ^ item as u64
}

/// Token-weighted masked NLL on whole-video batches with masks drawn from
/// `seed`, so different models see identical evaluation batches.
pub fn held_out_nll(model: &MebtModel, grids: &[TokenGrid], gamma: GammaKind, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut count) = (0.0, 0usize);
    for grid in grids {
        for _ in 0..draws {
            let r = sample_mask_ratio(gamma, grid.len(), &mut rng);
            let batch = make_training_batch_with(grid, grid.t, r, &mut rng)?;
            let mut fx = Fwd::eval(&model.store);
            let logits = model.forward(&mut fx, &batch)?;
            let l = mebt_loss(&mut fx, logits, &batch.targets)?;
            total += fx.tape.value(l).scalar_value() * batch.n_masked() as f64;
            count += batch.n_masked();
        }
    }
    if count == 0 {
        return Err(MebtError::config("no evaluation grids"));
    }
    Ok(total / count as f64)
}

/// Token grids for every corpus video, cached as `tokens_{i:05}.mbt` under
/// `cache` when given.
pub fn tokenize_corpus(
    manifest: &CorpusManifest,
    tokenizer: &Tokenizer,
    cache: Option<&Path>,
) -> Result<Vec<TokenGrid>> {
    if let Some(dir) = cache {
        std::fs::create_dir_all(dir).map_err(|e| MebtError::io(dir, e))?;
    }
    let vocab = tokenizer.config.codebook_size;
    (0..manifest.entries.len())
        .map(|i| {
            let path = cache.map(|d| d.join(format!("tokens_{i:05}.mbt")));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                return TokenGrid::from_array(&read_tensor(p)?, vocab);
            }
            let grid = tokenizer.tokenize(&manifest.load_video(i)?)?;
            if let Some(p) = path {
                write_tensor(p, &grid.to_array())?;
            }
            Ok(grid)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(t: usize, h: usize, w: usize, vocab: usize, seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = (0..t * h * w).map(|_| rng.random_range(0..vocab) as u16).collect();
        TokenGrid::new(t, h, w, vocab, idx).unwrap()
    }

    fn loss_of(logits: Tensor, targets: &[u16]) -> f64 {
        let store = crate::autograd::ParamStore::new();
        let mut fx = Fwd::eval(&store);
        let l = fx.tape.input(logits);
        let out = mebt_loss(&mut fx, l, targets).unwrap();
        fx.tape.value(out).scalar_value()
    }

    #[test]
    fn loss_examples() {
        assert!((loss_of(Tensor::zeros(3, 4), &[0, 1, 3]) - 4f64.ln()).abs() < 1e-12);
        let probs = |p: [f64; 4]| p.map(f64::ln).to_vec();
        let mut rows = probs([0.5, 0.25, 0.125, 0.125]);
        rows.extend(probs([0.25, 0.25, 0.25, 0.25]));
        let l = loss_of(Tensor::from_vec(2, 4, rows), &[0, 1]);
        assert!((l - 1.0397).abs() < 1e-4);
        assert!((l + (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
        let sharp = Tensor::from_vec(1, 3, vec![0.0, 60.0, 0.0]);
        assert!(loss_of(sharp, &[1]) < 1e-20);
    }

    #[test]
    fn loss_shape_mismatch_is_logic_error() {
        let store = crate::autograd::ParamStore::new();
        let mut fx = Fwd::eval(&store);
        let l = fx.tape.input(Tensor::zeros(2, 4));
        assert!(matches!(mebt_loss(&mut fx, l, &[0]), Err(MebtError::Logic(_))));
        assert!(matches!(mebt_loss(&mut fx, l, &[0, 4]), Err(MebtError::Logic(_))));
    }

    #[test]
    fn full_interval_starts_at_zero() {
        let g = grid(8, 2, 2, 5, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrainConfig::default();
        for n in 0..50 {
            let b = make_training_batch(&g, n, &cfg, &mut rng).unwrap();
            assert_eq!(b.interval, (0, 8));
            assert_eq!(b.n, 32);
        }
    }

    #[test]
    fn uniform_curriculum_covers_every_length() {
        let g = grid(6, 1, 2, 5, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig {
            curriculum: Curriculum::Uniform,
            ..Default::default()
        };
        let mut seen = [0usize; 7];
        for n in 0..3000 {
            seen[make_training_batch(&g, n, &cfg, &mut rng).unwrap().interval.1] += 1;
        }
        for &c in &seen[1..] {
            assert!((c as f64 - 500.0).abs() < 100.0, "{seen:?}");
        }
    }

    #[test]
    fn gaussian_ramp_mean_matches_simulation() {
        // the schedule alone is the oracle: simulate clamp(ceil(N(1 + n/a, b))) directly
        let alpha = 1000.0;
        let cfg = TrainConfig {
            curriculum: Curriculum::Gaussian,
            alpha,
            beta_sched: 2.0,
            ..Default::default()
        };
        let g = grid(16, 1, 1, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let steps = alpha as u64;
        let mean_v = (0..steps)
            .map(|n| make_training_batch(&g, n, &cfg, &mut rng).unwrap().interval.1 as f64)
            .sum::<f64>()
            / steps as f64;
        let mut oracle = ChaCha8Rng::seed_from_u64(99);
        let reps = 20;
        let mut sim = 0.0;
        for _ in 0..reps {
            for n in 0..steps {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut oracle);
                let v_hat = 1.0 + n as f64 / alpha + 2.0 * z;
                sim += v_hat.ceil().clamp(1.0, 16.0);
            }
        }
        sim /= (reps * steps) as f64;
        assert!((mean_v - sim).abs() < 0.2, "{mean_v} vs {sim}");
        // ceiling and the lower clamp lift the mean above the 1.5 of the unclamped ramp
        assert!((sim - 2.4).abs() < 0.05, "{sim}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn emitted_batches_satisfy_invariants(t in 1usize..10, h in 1usize..4, w in 1usize..4, seed in any::<u64>(), uniform in any::<bool>()) {
            let g = grid(t, h, w, 7, seed);
            let cfg = TrainConfig {
                curriculum: if uniform { Curriculum::Uniform } else { Curriculum::Gaussian },
                alpha: 10.0,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for n in 0..160u64 {
                let b = make_training_batch(&g, n, &cfg, &mut rng).unwrap();
                let (start, v) = b.interval;
                let (lo, hi) = (start * h * w, (start + v) * h * w);
                prop_assert!(b.n_masked() >= 1);
                prop_assert_eq!(b.n_masked() + b.n_context(), b.n);
                prop_assert!(b.masked.iter().all(|p| (lo..hi).contains(p)));
                prop_assert!(b.context.iter().all(|(p, tok)| (lo..hi).contains(p) && g.indices[*p] == *tok));
                prop_assert!(b.context.iter().all(|(p, _)| b.masked.binary_search(p).is_err()));
                prop_assert!(b.masked.iter().zip(&b.targets).all(|(p, tok)| g.indices[*p] == *tok));
            }
        }
    }
}
