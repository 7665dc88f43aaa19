//! Iterative confidence-based decoding, revision and sequential priming.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MebtError, Result};
use crate::model::{ArModel, MaskPredictor, MaskedBatch};
use crate::schedules::{tokens_decoded_after, GammaKind};
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Decoding steps `S`.
    #[serde(rename = "S")]
    pub steps: usize,
    pub gamma: GammaKind,
    /// Sampling support size; `None` keeps every token.
    pub top_k: Option<usize>,
    /// Context-noise scale `tau` of the promotion ranking.
    pub tau: f64,
    /// Revision partitions `R`.
    #[serde(rename = "R")]
    pub partitions: usize,
    /// Logit divisor during revision; 0 means argmax.
    pub revision_temperature: f64,
    /// Revision repeats `N_R`.
    #[serde(rename = "N_R")]
    pub revision_repeats: usize,
    /// Tokens decoded one at a time before the parallel phase, `N_d`.
    #[serde(rename = "N_d")]
    pub n_prime: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            gamma: GammaKind::Cosine,
            top_k: None,
            tau: 2.0,
            partitions: 2,
            revision_temperature: 0.7,
            revision_repeats: 2,
            n_prime: 0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, n: usize, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(MebtError::config(m));
        if self.steps == 0 {
            return bad("decode.S must be at least 1".into());
        }
        if self.partitions == 0 || self.partitions > n.max(1) {
            return bad(format!("decode.R must lie in 1..={n}"));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab {
                return bad(format!("decode.top_k must lie in 1..={vocab}"));
            }
        }
        if self.tau.is_nan() || self.tau < 0.0 || self.revision_temperature.is_nan() || self.revision_temperature < 0.0
        {
            return bad("decode.tau and decode.revision_temperature must be non-negative".into());
        }
        if self.n_prime > n {
            return bad(format!("decode.N_d = {} exceeds N = {n}", self.n_prime));
        }
        Ok(())
    }
}

/// Standard Gumbel draw `-ln(-ln u)`, `u` uniform on the open interval.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// `p + G (1 - s/S) tau`. No randomness is consumed when the coefficient is
/// zero.
pub fn confidence<R: Rng + ?Sized>(p: f64, s: usize, total: usize, tau: f64, rng: &mut R) -> f64 {
    let coef = (1.0 - s as f64 / total as f64) * tau;
    if coef == 0.0 {
        p
    } else {
        p + gumbel(rng) * coef
    }
}

/// Keeps the `k` largest logits (ties to the lower index), the rest become
/// `-inf`.
pub fn top_k_filter(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > logits.len() {
        return Err(MebtError::config(format!("top_k {k} outside 1..={}", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &i in &order[..k] {
        out[i] = logits[i];
    }
    Ok(out)
}

/// Softmax probabilities of `logits`; `-inf` entries get zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Inverse-CDF draw; returns the token and its probability.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return (i, p);
            }
        }
    }
    (last, probs[last])
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(logits: &[f64], top_k: Option<usize>, rng: &mut R) -> Result<(usize, f64)> {
    let filtered = match top_k {
        Some(k) => top_k_filter(logits, k)?,
        None => logits.to_vec(),
    };
    Ok(sample_categorical(&softmax(&filtered), rng))
}

/// Shuffles `0..n` and cuts it into `r` parts whose sizes differ by at most
/// one (the first `n % r` parts are larger). Each part is sorted.
pub fn even_partition<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let (base, extra) = (n / r, n % r);
    let mut parts = Vec::with_capacity(r);
    let mut start = 0;
    for i in 0..r {
        let len = base + usize::from(i < extra);
        let mut part = all[start..start + len].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += len;
    }
    parts
}

fn grid_size(grid: (usize, usize, usize)) -> usize {
    grid.0 * grid.1 * grid.2
}

fn forward<M: MaskPredictor + ?Sized>(model: &M, context: &[Option<u16>], masked: Vec<usize>) -> Result<Tensor> {
    let (t, h, w) = model.grid();
    let ctx = context
        .iter()
        .enumerate()
        .filter_map(|(p, tok)| tok.map(|t| (p, t)))
        .collect();
    let batch = MaskedBatch::new(ctx, masked, vec![], (0, t), h * w)?;
    let logits = model.predict(&batch)?;
    if logits.shape() != (batch.n_masked(), model.vocab()) {
        return Err(MebtError::config("model output does not match the masked positions"));
    }
    Ok(logits)
}

/// Decoded token grid plus the number of model forwards spent.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenGrid,
    pub forwards: usize,
}

/// Decodes `N_d` tokens one at a time in raster order, each from a forward
/// with every remaining position masked. Returns the partial grid.
pub fn prime_long_video<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<Option<u16>>, usize)> {
    let n = grid_size(model.grid());
    config.validate(n, model.vocab())?;
    let mut tokens = vec![None; n];
    for i in 0..config.n_prime {
        let logits = forward(model, &tokens, (i..n).collect())?;
        let (tok, _) = draw(logits.row(0), config.top_k, rng)?;
        tokens[i] = Some(tok as u16);
    }
    Ok((tokens, config.n_prime))
}

/// Iterative parallel decoding from the partial grid `start` (empty context
/// when all `None`). Performs exactly `S` forwards unless nothing is left.
pub fn decode_iterative<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &DecodeConfig,
    start: Vec<Option<u16>>,
    rng: &mut R,
) -> Result<Decoded> {
    let (t, h, w) = model.grid();
    let n = t * h * w;
    if start.len() != n {
        return Err(MebtError::config(format!(
            "partial grid has {} positions, model expects {n}",
            start.len()
        )));
    }
    config.validate(n, model.vocab())?;
    let mut tokens = start;
    let primed = tokens.iter().filter(|t| t.is_some()).count();
    let remaining = n - primed;
    let mut forwards = 0;
    if remaining > 0 {
        for s in 0..config.steps {
            let masked: Vec<usize> = (0..n).filter(|&p| tokens[p].is_none()).collect();
            let target = primed + tokens_decoded_after(s, config.steps, remaining, config.gamma)?;
            let logits = forward(model, &tokens, masked.clone())?;
            forwards += 1;
            let mut scored = Vec::with_capacity(masked.len());
            for (row, &p) in masked.iter().enumerate() {
                let (tok, prob) = draw(logits.row(row), config.top_k, rng)?;
                let c = confidence(prob, s, config.steps, config.tau, rng);
                scored.push((c, p, tok as u16));
            }
            let promote = target - (n - masked.len());
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, p, tok) in &scored[..promote] {
                tokens[p] = Some(tok);
            }
        }
    }
    let indices = tokens
        .into_iter()
        .map(|t| t.ok_or_else(|| MebtError::logic("decoding left a position empty")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Decoded {
        tokens: TokenGrid::new(t, h, w, model.vocab(), indices)?,
        forwards,
    })
}

/// `N_R` rounds of re-masking each part of a fresh even partition and
/// re-sampling it with temperature-scaled logits. `N_R * R` forwards.
pub fn revise<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    tokens: &TokenGrid,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Decoded> {
    let n = grid_size(model.grid());
    if tokens.len() != n || (tokens.t, tokens.h, tokens.w) != model.grid() {
        return Err(MebtError::logic("revision needs a grid of the model's shape"));
    }
    if tokens.indices.iter().any(|&i| i as usize >= model.vocab()) {
        return Err(MebtError::logic("revision needs a fully decoded grid"));
    }
    config.validate(n, model.vocab())?;
    let mut current: Vec<Option<u16>> = tokens.indices.iter().map(|&i| Some(i)).collect();
    let mut forwards = 0;
    for _ in 0..config.revision_repeats {
        for part in even_partition(n, config.partitions, rng) {
            for &p in &part {
                current[p] = None;
            }
            let logits = forward(model, &current, part.clone())?;
            forwards += 1;
            for (row, &p) in part.iter().enumerate() {
                let l = logits.row(row);
                let tok = if config.revision_temperature == 0.0 {
                    argmax(l)
                } else {
                    let scaled: Vec<f64> = l.iter().map(|v| v / config.revision_temperature).collect();
                    sample_categorical(&softmax(&scaled), rng).0
                };
                current[p] = Some(tok as u16);
            }
        }
    }
    Ok(Decoded {
        tokens: TokenGrid::new(
            tokens.t,
            tokens.h,
            tokens.w,
            tokens.vocab,
            current
                .into_iter()
                .map(|t| t.expect("revision refills its part"))
                .collect(),
        )?,
        forwards,
    })
}

/// Prime, decode and revise with a stream seeded from `config.seed`.
pub fn generate<M: MaskPredictor + ?Sized>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (partial, primed) = prime_long_video(model, config, &mut rng)?;
    let decoded = decode_iterative(model, config, partial, &mut rng)?;
    let revised = revise(model, &decoded.tokens, config, &mut rng)?;
    Ok(Decoded {
        tokens: revised.tokens,
        forwards: primed + decoded.forwards + revised.forwards,
    })
}

/// Raster-order sampling from the autoregressive baseline; one forward per
/// token.
pub fn sample_ar(model: &ArModel, top_k: Option<usize>, seed: u64) -> Result<Decoded> {
    let (t, h, w) = model.config.grid;
    let n = t * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = model.next_logits(&seq)?;
        let (tok, _) = draw(&logits, top_k, &mut rng)?;
        seq.push(tok as u16);
    }
    Ok(Decoded {
        tokens: TokenGrid::new(t, h, w, model.config.vocab, seq)?,
        forwards: n,
    })
}

/// Test double: fixed logits per position, optionally shifted by the
/// number of context tokens so predictions depend on commit order.
#[derive(Clone, Debug)]
pub struct TablePredictor {
    pub grid: (usize, usize, usize),
    pub logits: Vec<Vec<f64>>,
    /// Added to token `c % U` for every context token of value `c`.
    pub context_shift: f64,
}

impl TablePredictor {
    pub fn position_independent(grid: (usize, usize, usize), logits: Vec<f64>) -> Self {
        Self {
            grid,
            logits: vec![logits; grid_size(grid)],
            context_shift: 0.0,
        }
    }
}

impl MaskPredictor for TablePredictor {
    fn vocab(&self) -> usize {
        self.logits[0].len()
    }

    fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    fn predict(&self, batch: &MaskedBatch) -> Result<Tensor> {
        let u = self.vocab();
        let mut shift = vec![0.0; u];
        for &(_, tok) in &batch.context {
            shift[tok as usize % u] += self.context_shift;
        }
        let mut data = Vec::with_capacity(batch.n_masked() * u);
        for &p in &batch.masked {
            data.extend(self.logits[p].iter().zip(&shift).map(|(l, s)| l + s));
        }
        Ok(Tensor::from_vec(batch.n_masked(), u, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> TablePredictor {
        TablePredictor::position_independent((2, 2, 2), vec![0.3, -1.0, 1.2, 0.0, 0.5])
    }

    #[test]
    fn top_k_examples() {
        let l = [3.0, 2.0, 2.0, 0.0];
        let f = top_k_filter(&l, 2).unwrap();
        assert_eq!(f, vec![3.0, 2.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(top_k_filter(&l, 4).unwrap(), l.to_vec());
        assert!(top_k_filter(&l, 0).is_err());
        assert!(top_k_filter(&l, 5).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(draw(&[0.1, 2.0, 1.9], Some(1), &mut rng).unwrap().0, 1);
        }
    }

    #[test]
    fn confidence_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(confidence(0.4, 3, 8, 0.0, &mut rng), 0.4);
        assert_eq!(confidence(0.4, 8, 8, 5.0, &mut rng), 0.4);
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| confidence(0.25, 0, 4, 1.0, &mut rng) - 0.25)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn partitions_are_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sizes = |n, r, rng: &mut ChaCha8Rng| even_partition(n, r, rng).iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(64, 2, &mut rng), vec![32, 32]);
        assert_eq!(sizes(64, 3, &mut rng), vec![22, 21, 21]);
        let parts = even_partition(10, 4, &mut rng);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_step_commits_everything() {
        let cfg = DecodeConfig {
            steps: 1,
            revision_repeats: 0,
            ..Default::default()
        };
        let out = generate(&stub(), &cfg).unwrap();
        assert_eq!(out.forwards, 1);
        assert_eq!(out.tokens.len(), 8);
    }

    #[test]
    fn forward_counts_follow_the_contract() {
        let cfg = DecodeConfig {
            steps: 5,
            partitions: 3,
            revision_repeats: 2,
            n_prime: 2,
            ..Default::default()
        };
        assert_eq!(generate(&stub(), &cfg).unwrap().forwards, 2 + 5 + 6);
        let all = DecodeConfig {
            n_prime: 8,
            revision_repeats: 0,
            ..cfg
        };
        assert_eq!(generate(&stub(), &all).unwrap().forwards, 8);
    }

    #[test]
    fn zero_revision_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = TokenGrid::new(2, 2, 2, 5, vec![0, 1, 2, 3, 4, 0, 1, 2]).unwrap();
        let cfg = DecodeConfig {
            revision_repeats: 0,
            ..Default::default()
        };
        let out = revise(&stub(), &grid, &cfg, &mut rng).unwrap();
        assert_eq!(out.tokens, grid);
        assert_eq!(out.forwards, 0);
    }

    #[test]
    fn cold_revision_takes_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = TokenGrid::new(2, 2, 2, 5, vec![0; 8]).unwrap();
        let cfg = DecodeConfig {
            revision_temperature: 0.0,
            revision_repeats: 1,
            ..Default::default()
        };
        assert_eq!(
            revise(&stub(), &grid, &cfg, &mut rng).unwrap().tokens.indices,
            vec![2; 8]
        );
        let cool = DecodeConfig {
            revision_temperature: 1e-6,
            ..cfg
        };
        assert_eq!(
            revise(&stub(), &grid, &cool, &mut rng).unwrap().tokens.indices,
            vec![2; 8]
        );
    }

    #[test]
    fn partial_grids_are_rejected_by_revision() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = TokenGrid {
            t: 2,
            h: 2,
            w: 2,
            vocab: 5,
            indices: vec![0, 1, 2, 3, 4, 0, 1, u16::MAX],
        };
        assert!(matches!(
            revise(&stub(), &grid, &DecodeConfig::default(), &mut rng),
            Err(MebtError::Logic(_))
        ));
    }

    #[test]
    fn config_errors() {
        assert!(DecodeConfig {
            top_k: Some(0),
            ..Default::default()
        }
        .validate(8, 5)
        .is_err());
        assert!(DecodeConfig {
            steps: 0,
            ..Default::default()
        }
        .validate(8, 5)
        .is_err());
        assert!(DecodeConfig {
            n_prime: 9,
            ..Default::default()
        }
        .validate(8, 5)
        .is_err());
        assert!(DecodeConfig {
            partitions: 9,
            ..Default::default()
        }
        .validate(8, 5)
        .is_err());
    }
}
