//! Layers shared by the tokenizer, the bottleneck transformer and the
//! baselines.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// A forward pass in progress: the tape plus the frozen parameter view and
/// the dropout stream.
pub struct Fwd<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    dropout: f64,
    rng: ChaCha8Rng,
    score_entries: u64,
}

impl<'a> Fwd<'a> {
    /// Inference-mode pass (dropout disabled).
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::train(store, 0.0, 0)
    }

    pub fn train(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            score_entries: 0,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let p = self.dropout;
        self.tape.dropout(x, p, &mut self.rng)
    }

    /// Attention-score entries (query x key products, summed over heads)
    /// materialized so far.
    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }
}

pub fn init_std(fan_in: usize) -> f64 {
    (1.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(d_in, d_out, init_std(d_in), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, d_out));
        Self { w, b }
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Var {
        let w = fx.p(self.w);
        let b = fx.p(self.b);
        let h = fx.tape.matmul(x, w);
        fx.tape.add_bias(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, d, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, d));
        Self { gamma, beta }
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Var {
        let g = fx.p(self.gamma);
        let b = fx.p(self.beta);
        fx.tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, expansion: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d * expansion, rng),
            down: Linear::new(store, &format!("{name}.down"), d * expansion, d, rng),
        }
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Var {
        let h = self.up.forward(fx, x);
        let h = fx.tape.gelu(h);
        self.down.forward(fx, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads >= 1 && d_model.is_multiple_of(heads),
            "d_model must divide into heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        }
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn project(&self, fx: &mut Fwd, xq: Var, xkv: Var) -> (Var, Var, Var) {
        let q = self.q.forward(fx, xq);
        let q = fx.tape.scale(q, 1.0 / (self.head_dim() as f64).sqrt());
        let k = self.k.forward(fx, xkv);
        let v = self.v.forward(fx, xkv);
        (q, k, v)
    }

    fn attend(&self, fx: &mut Fwd, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Var {
        let dh = self.head_dim();
        let (nq, nk) = (fx.tape.shape(q).0, fx.tape.shape(k).0);
        fx.score_entries += (self.heads * nq * nk) as u64;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    fx.tape.slice_cols(q, h * dh, dh),
                    fx.tape.slice_cols(k, h * dh, dh),
                    fx.tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = fx.tape.matmul_t(qh, false, kh, true);
            let probs = fx.tape.softmax(scores, mask);
            outs.push(fx.tape.matmul(probs, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            fx.tape.concat_cols(&outs)
        }
    }

    /// Queries from `xq` attend over all rows of `xkv`. `mask`, when given,
    /// is row-major `nq x nk` with `true` = allowed.
    pub fn forward(&self, fx: &mut Fwd, xq: Var, xkv: Var, mask: Option<&[bool]>) -> Var {
        let (q, k, v) = self.project(fx, xq, xkv);
        let out = self.attend(fx, q, k, v, mask);
        self.o.forward(fx, out)
    }

    /// Self-attention restricted to groups of rows. `groups` must partition
    /// `0..rows`; each row attends only within its own group.
    pub fn forward_grouped(&self, fx: &mut Fwd, x: Var, groups: &[Vec<usize>]) -> Var {
        let rows = fx.tape.shape(x).0;
        let (q, k, v) = self.project(fx, x, x);
        let mut outs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(rows);
        for group in groups {
            let ids = Rc::new(group.clone());
            let gq = fx.tape.gather_rows(q, ids.clone());
            let gk = fx.tape.gather_rows(k, ids.clone());
            let gv = fx.tape.gather_rows(v, ids);
            outs.push(self.attend(fx, gq, gk, gv, None));
            order.extend_from_slice(group);
        }
        assert_eq!(order.len(), rows, "groups must partition the rows");
        let stacked = fx.tape.concat_rows(&outs);
        let mut inverse = vec![usize::MAX; rows];
        for (slot, &row) in order.iter().enumerate() {
            inverse[row] = slot;
        }
        let restored = fx.tape.gather_rows(stacked, Rc::new(inverse));
        self.o.forward(fx, restored)
    }
}

/// Pre-norm residual attention + feed-forward block. Cross-attention blocks
/// carry a separate norm for the key/value stream.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_q: LayerNorm,
    pub ln_kv: Option<LayerNorm>,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        cross: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d_model),
            ln_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_kv"), d_model)),
            attn: Attention::new(store, &format!("{name}.attn"), d_model, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, 4, rng),
        }
    }

    fn feed_forward(&self, fx: &mut Fwd, x: Var) -> Var {
        let h = self.ln_ff.forward(fx, x);
        let h = self.ff.forward(fx, h);
        let h = fx.dropout(h);
        fx.tape.add(x, h)
    }

    /// `x` attends to `kv` (cross block) or to itself (self block).
    pub fn forward(&self, fx: &mut Fwd, x: Var, kv: Option<Var>, mask: Option<&[bool]>) -> Var {
        let hq = self.ln_q.forward(fx, x);
        let hkv = match (kv, &self.ln_kv) {
            (Some(kv), Some(ln)) => ln.forward(fx, kv),
            (Some(kv), None) => kv,
            (None, _) => hq,
        };
        let a = self.attn.forward(fx, hq, hkv, mask);
        let a = fx.dropout(a);
        let x = fx.tape.add(x, a);
        self.feed_forward(fx, x)
    }

    pub fn forward_grouped(&self, fx: &mut Fwd, x: Var, groups: &[Vec<usize>]) -> Var {
        let h = self.ln_q.forward(fx, x);
        let a = self.attn.forward_grouped(fx, h, groups);
        let a = fx.dropout(a);
        let x = fx.tape.add(x, a);
        self.feed_forward(fx, x)
    }
}
