//! Raster-order autoregressive baseline with causal dense attention.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Var};
use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint, CheckpointHeader};
use crate::error::{MebtError, Result};
use crate::nn::{Block, Fwd, LayerNorm, Linear};
use crate::tensor::Tensor;

use super::ModelConfig;

pub const AR_CHECKPOINT_KIND: &str = "ar-baseline";

/// Same width, heads and attention-layer count as the bottleneck model;
/// `backend`, `n_latent` and `window` are ignored.
#[derive(Clone, Debug)]
pub struct ArModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    start: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
}

impl ArModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut check = config.clone();
        check.backend = super::Backend::Full;
        check.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add("tok_emb", Tensor::randn(config.vocab, d, 0.02, &mut rng));
        let start = store.add("start", Tensor::randn(1, d, 0.02, &mut rng));
        let pos_emb = store.add("pos_emb", Tensor::randn(config.n_max(), d, 0.02, &mut rng));
        let blocks = (0..config.dense_layers())
            .map(|i| Block::new(&mut store, &format!("layer{i}"), d, config.num_heads, false, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut store, "ln_out", d);
        let head = Linear::new(&mut store, "head", d, config.vocab, &mut rng);
        Ok(Self {
            config,
            store,
            tok_emb,
            start,
            pos_emb,
            blocks,
            ln_out,
            head,
        })
    }

    /// Logits for raster positions `0..tokens.len()`; row `i` sees the start
    /// embedding and `tokens[..i]` only.
    pub fn forward(&self, fx: &mut Fwd, tokens: &[u16]) -> Result<Var> {
        let len = tokens.len();
        if len == 0 || len > self.config.n_max() {
            return Err(MebtError::data(format!(
                "sequence length {len} outside 1..={}",
                self.config.n_max()
            )));
        }
        if tokens.iter().any(|&t| t as usize >= self.config.vocab) {
            return Err(MebtError::data("token outside the vocabulary"));
        }
        let start = fx.p(self.start);
        let input = if len > 1 {
            let emb = fx.p(self.tok_emb);
            let prev = fx
                .tape
                .gather_rows(emb, Rc::new(tokens[..len - 1].iter().map(|&t| t as usize).collect()));
            fx.tape.concat_rows(&[start, prev])
        } else {
            start
        };
        let pos = fx.p(self.pos_emb);
        let pos = fx.tape.slice_rows(pos, 0, len);
        let mut x = fx.tape.add(input, pos);
        let mask: Vec<bool> = (0..len * len).map(|k| k % len <= k / len).collect();
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(fx, x, None, Some(&mask));
            if !fx.tape.value(x).all_finite() {
                return Err(MebtError::Numeric {
                    layer: l,
                    msg: "non-finite activations".into(),
                });
            }
        }
        let h = self.ln_out.forward(fx, x);
        Ok(self.head.forward(fx, h))
    }

    /// Inference logits for the next position after `prefix`.
    pub fn next_logits(&self, prefix: &[u16]) -> Result<Vec<f64>> {
        let mut tokens = prefix.to_vec();
        tokens.push(0);
        let mut fx = Fwd::eval(&self.store);
        let logits = self.forward(&mut fx, &tokens)?;
        let v = fx.tape.value(logits);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    pub fn header(&self, step: u64, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            kind: AR_CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            step,
            seed,
            tensors: self.store.names().to_vec(),
            extra: serde_json::json!({ "layers": self.blocks.len() }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64) -> Result<()> {
        save_checkpoint(path, &self.header(step, seed), &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, store) = load_checkpoint(path)?;
        if header.kind != AR_CHECKPOINT_KIND {
            return Err(MebtError::data(format!(
                "expected an {AR_CHECKPOINT_KIND} checkpoint, got {}",
                header.kind
            )));
        }
        let config: ModelConfig = serde_json::from_value(header.config)?;
        let mut model = Self::new(config, header.seed)?;
        restore_params(&mut model.store, &store)?;
        Ok(model)
    }
}
