//! Bottleneck transformer over token grids, its dense ablation backends and
//! the raster-order autoregressive baseline.

mod ar;
mod cost;

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Var};
use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint, CheckpointHeader};
use crate::error::{MebtError, Result};
use crate::nn::{init_std, Block, Fwd, LayerNorm, Linear};
use crate::tensor::Tensor;

pub use ar::{ArModel, AR_CHECKPOINT_KIND};
pub use cost::{count_attention_cost, AttentionCost, CostReport};

pub const CHECKPOINT_KIND: &str = "mebt-model";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Mebt,
    Full,
    Axial,
    Window,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Mebt => "mebt",
            Backend::Full => "full",
            Backend::Axial => "axial",
            Backend::Window => "window",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = MebtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mebt" => Ok(Self::Mebt),
            "full" => Ok(Self::Full),
            "axial" => Ok(Self::Axial),
            "window" => Ok(Self::Window),
            other => Err(MebtError::config(format!("unknown backend {other}"))),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Attention blocks. For the bottleneck backend a block is a pair of
    /// attention layers and the blocks are split evenly between encoder and
    /// decoder; dense backends run `2 * num_layers` attention layers.
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    /// Latent bottleneck size `N_L`.
    pub n_latent: usize,
    /// Token grid `(t, h, w)`; `N_max = t * h * w`.
    pub grid: (usize, usize, usize),
    pub vocab: usize,
    pub dropout: f64,
    pub backend: Backend,
    /// Spatial window (positions) of the window backend.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            d_model: 64,
            n_latent: 32,
            grid: (16, 4, 4),
            vocab: 64,
            dropout: 0.1,
            backend: Backend::Mebt,
            window: 16,
        }
    }
}

impl ModelConfig {
    pub fn n_max(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn frame_tokens(&self) -> usize {
        self.grid.1 * self.grid.2
    }

    pub fn encoder_blocks(&self) -> usize {
        self.num_layers / 2
    }

    pub fn decoder_blocks(&self) -> usize {
        self.num_layers - self.num_layers / 2
    }

    /// Attention layers of the dense backends.
    pub fn dense_layers(&self) -> usize {
        2 * self.num_layers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MebtError::config(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be positive");
        }
        if self.backend == Backend::Mebt && (self.num_layers < 2 || !self.num_layers.is_multiple_of(2)) {
            return bad("the bottleneck backend needs an even num_layers >= 2");
        }
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("d_model must be a positive multiple of num_heads");
        }
        if self.n_latent == 0 {
            return bad("n_latent must be positive");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.grid.2 == 0 {
            return bad("grid dimensions must be positive");
        }
        if self.vocab < 2 || self.vocab > u16::MAX as usize + 1 {
            return bad("vocab must lie in 2..=65536");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        Ok(())
    }

    /// `(t, y, x)` of a flat position.
    pub fn coords(&self, p: usize) -> (usize, usize, usize) {
        let ft = self.frame_tokens();
        (p / ft, (p % ft) / self.grid.2, p % self.grid.2)
    }
}

/// Context tokens and masked slots of one training or decoding instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// `(position, token)` pairs, sorted by position.
    pub context: Vec<(usize, u16)>,
    /// Sorted unique masked positions.
    pub masked: Vec<usize>,
    /// Ground-truth tokens at `masked`; empty at inference.
    pub targets: Vec<u16>,
    /// Positions in the active interval.
    pub n: usize,
    /// `(start frame, length)` in latent frames.
    pub interval: (usize, usize),
}

impl MaskedBatch {
    pub fn new(
        mut context: Vec<(usize, u16)>,
        masked: Vec<usize>,
        targets: Vec<u16>,
        interval: (usize, usize),
        frame_tokens: usize,
    ) -> Result<Self> {
        if masked.is_empty() {
            return Err(MebtError::data("a batch needs at least one masked position"));
        }
        if !masked.windows(2).all(|w| w[0] < w[1]) {
            return Err(MebtError::data("masked positions must be sorted and unique"));
        }
        if !targets.is_empty() && targets.len() != masked.len() {
            return Err(MebtError::data("targets must match masked positions"));
        }
        context.sort_by_key(|&(p, _)| p);
        if context.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MebtError::data("duplicate context position"));
        }
        let lo = interval.0 * frame_tokens;
        let hi = (interval.0 + interval.1) * frame_tokens;
        let inside = |p: usize| (lo..hi).contains(&p);
        if !masked.iter().all(|&p| inside(p)) || !context.iter().all(|&(p, _)| inside(p)) {
            return Err(MebtError::data("position outside the active interval"));
        }
        if context.iter().any(|&(p, _)| masked.binary_search(&p).is_ok()) {
            return Err(MebtError::data("context and masked positions overlap"));
        }
        Ok(Self {
            context,
            masked,
            targets,
            n: hi - lo,
            interval,
        })
    }

    pub fn n_context(&self) -> usize {
        self.context.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }
}

/// Anything that predicts logits for masked positions given a context.
pub trait MaskPredictor {
    fn vocab(&self) -> usize;
    fn grid(&self) -> (usize, usize, usize);
    /// `N_M x U` logits for `batch.masked`.
    fn predict(&self, batch: &MaskedBatch) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
enum Layers {
    Bottleneck {
        latent_init: ParamId,
        /// (cross-attention latents -> context, latent self-attention)
        encoder: Vec<(Block, Block)>,
        /// (latents over [latents; masks], masks over latents)
        decoder: Vec<(Block, Block)>,
    },
    Dense(Vec<Block>),
}

#[derive(Clone, Debug)]
pub struct MebtModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    mask_emb: ParamId,
    layers: Layers,
    ln_out: LayerNorm,
    head: Linear,
}

impl MebtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add("tok_emb", Tensor::randn(config.vocab, d, 0.02, &mut rng));
        let pos_emb = store.add("pos_emb", Tensor::randn(config.n_max(), d, 0.02, &mut rng));
        let mask_emb = store.add("mask_emb", Tensor::randn(1, d, 0.02, &mut rng));
        let heads = config.num_heads;
        let layers = match config.backend {
            Backend::Mebt => {
                let latent_init = store.add("latent_init", Tensor::randn(config.n_latent, d, init_std(d), &mut rng));
                let encoder = (0..config.encoder_blocks())
                    .map(|i| {
                        (
                            Block::new(&mut store, &format!("enc{i}.cross"), d, heads, true, &mut rng),
                            Block::new(&mut store, &format!("enc{i}.self"), d, heads, false, &mut rng),
                        )
                    })
                    .collect();
                let decoder = (0..config.decoder_blocks())
                    .map(|i| {
                        (
                            Block::new(&mut store, &format!("dec{i}.latent"), d, heads, true, &mut rng),
                            Block::new(&mut store, &format!("dec{i}.mask"), d, heads, true, &mut rng),
                        )
                    })
                    .collect();
                Layers::Bottleneck {
                    latent_init,
                    encoder,
                    decoder,
                }
            }
            _ => Layers::Dense(
                (0..config.dense_layers())
                    .map(|i| Block::new(&mut store, &format!("layer{i}"), d, heads, false, &mut rng))
                    .collect(),
            ),
        };
        let ln_out = LayerNorm::new(&mut store, "ln_out", d);
        let head = Linear::new(&mut store, "head", d, config.vocab, &mut rng);
        Ok(Self {
            config,
            store,
            tok_emb,
            pos_emb,
            mask_emb,
            layers,
            ln_out,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Context embeddings (`N_C x d`, token + position) and mask embeddings
    /// (`N_M x d`, shared mask vector + position).
    pub fn embed(&self, fx: &mut Fwd, batch: &MaskedBatch) -> Result<(Option<Var>, Var)> {
        let n_max = self.config.n_max();
        let positions_ok = batch
            .masked
            .iter()
            .chain(batch.context.iter().map(|(p, _)| p))
            .all(|&p| p < n_max);
        if !positions_ok {
            return Err(MebtError::data(format!("position outside 0..{n_max}")));
        }
        if batch.context.iter().any(|&(_, t)| t as usize >= self.config.vocab) {
            return Err(MebtError::data(format!(
                "context token outside 0..{}",
                self.config.vocab
            )));
        }
        let pos = fx.p(self.pos_emb);
        let context = if batch.context.is_empty() {
            None
        } else {
            let tok = fx.p(self.tok_emb);
            let ids = Rc::new(batch.context.iter().map(|&(_, t)| t as usize).collect::<Vec<_>>());
            let pids = Rc::new(batch.context.iter().map(|&(p, _)| p).collect::<Vec<_>>());
            let t = fx.tape.gather_rows(tok, ids);
            let p = fx.tape.gather_rows(pos, pids);
            Some(fx.tape.add(t, p))
        };
        let m = fx.p(self.mask_emb);
        let mp = fx.tape.gather_rows(pos, Rc::new(batch.masked.clone()));
        let masks = fx.tape.add_bias(mp, m);
        Ok((context, masks))
    }

    fn check(fx: &Fwd, x: Var, layer: usize) -> Result<()> {
        if fx.tape.value(x).all_finite() {
            Ok(())
        } else {
            Err(MebtError::Numeric {
                layer,
                msg: "non-finite activations".into(),
            })
        }
    }

    /// Latent state after the encoder. Cross-attention blocks are skipped
    /// when there is no context.
    pub fn encoder_forward(&self, fx: &mut Fwd, context: Option<Var>) -> Result<Var> {
        let Layers::Bottleneck {
            latent_init, encoder, ..
        } = &self.layers
        else {
            return Err(MebtError::logic("encoder_forward needs the bottleneck backend"));
        };
        let mut z = fx.p(*latent_init);
        for (i, (cross, selfb)) in encoder.iter().enumerate() {
            if let Some(ctx) = context {
                z = cross.forward(fx, z, Some(ctx), None);
                Self::check(fx, z, 2 * i)?;
            }
            z = selfb.forward(fx, z, None, None);
            Self::check(fx, z, 2 * i + 1)?;
        }
        Ok(z)
    }

    /// Logits for the mask slots given the encoder latents.
    pub fn decoder_forward(&self, fx: &mut Fwd, latents: Var, masks: Var) -> Result<Var> {
        let Layers::Bottleneck { encoder, decoder, .. } = &self.layers else {
            return Err(MebtError::logic("decoder_forward needs the bottleneck backend"));
        };
        let base = 2 * encoder.len();
        let (mut z, mut zm) = (latents, masks);
        for (i, (lat, msk)) in decoder.iter().enumerate() {
            let kv = fx.tape.concat_rows(&[z, zm]);
            z = lat.forward(fx, z, Some(kv), None);
            Self::check(fx, z, base + 2 * i)?;
            zm = msk.forward(fx, zm, Some(z), None);
            Self::check(fx, zm, base + 2 * i + 1)?;
        }
        Ok(self.project(fx, zm))
    }

    fn project(&self, fx: &mut Fwd, x: Var) -> Var {
        let h = self.ln_out.forward(fx, x);
        self.head.forward(fx, h)
    }

    /// `N_M x U` logits for `batch` under the configured backend.
    pub fn forward(&self, fx: &mut Fwd, batch: &MaskedBatch) -> Result<Var> {
        let (context, masks) = self.embed(fx, batch)?;
        match &self.layers {
            Layers::Bottleneck { .. } => {
                let z = self.encoder_forward(fx, context)?;
                self.decoder_forward(fx, z, masks)
            }
            Layers::Dense(blocks) => {
                let mut positions: Vec<usize> = batch.context.iter().map(|&(p, _)| p).collect();
                positions.extend_from_slice(&batch.masked);
                let mut x = match context {
                    Some(c) => fx.tape.concat_rows(&[c, masks]),
                    None => masks,
                };
                for (l, block) in blocks.iter().enumerate() {
                    x = match self.config.backend {
                        Backend::Full => block.forward(fx, x, None, None),
                        backend => {
                            let groups = attention_groups(&self.config, backend, l, &positions);
                            block.forward_grouped(fx, x, &groups)
                        }
                    };
                    Self::check(fx, x, l)?;
                }
                let m = fx.tape.slice_rows(x, batch.n_context(), batch.n_masked());
                Ok(self.project(fx, m))
            }
        }
    }

    pub fn header(&self, step: u64, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            step,
            seed,
            tensors: self.store.names().to_vec(),
            extra: serde_json::json!({
                "backend": self.config.backend.name(),
                "encoder_blocks": self.config.encoder_blocks(),
                "decoder_blocks": self.config.decoder_blocks(),
                "n_latent": self.config.n_latent,
            }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64) -> Result<()> {
        save_checkpoint(path, &self.header(step, seed), &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, store) = load_checkpoint(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(MebtError::data(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, got {}",
                header.kind
            )));
        }
        let config: ModelConfig = serde_json::from_value(header.config)?;
        let mut model = Self::new(config, header.seed)?;
        restore_params(&mut model.store, &store)?;
        Ok(model)
    }
}

impl MaskPredictor for MebtModel {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn grid(&self) -> (usize, usize, usize) {
        self.config.grid
    }

    fn predict(&self, batch: &MaskedBatch) -> Result<Tensor> {
        let mut fx = Fwd::eval(&self.store);
        let logits = self.forward(&mut fx, batch)?;
        Ok(fx.tape.value(logits).clone())
    }
}

/// Row groups for layer `layer` of the axial or window backend. Rows are
/// indexed as in `positions`; each group lists rows in ascending order.
pub fn attention_groups(config: &ModelConfig, backend: Backend, layer: usize, positions: &[usize]) -> Vec<Vec<usize>> {
    let w = config.grid.2;
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (row, &p) in positions.iter().enumerate() {
        let (t, y, x) = config.coords(p);
        let key = match backend {
            // rotate through the t-, h- and w-axes; the key fixes the other two
            Backend::Axial => match layer % 3 {
                0 => (y, x),
                1 => (t, x),
                _ => (t, y),
            },
            Backend::Window if layer.is_multiple_of(2) => (t, 0),
            Backend::Window => ((y * w + x) / config.window, 0),
            _ => (0, 0),
        };
        groups.entry(key).or_default().push(row);
    }
    groups.into_values().collect()
}
