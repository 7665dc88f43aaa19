//! 3D vector-quantized autoencoder mapping videos to token grids.
//!
//! The encoder is three strided 3D convolutions whose kernel equals their
//! stride (non-overlapping patch convolutions), each followed by GELU, and a
//! final projection to the code width. The decoder mirrors it with
//! transposed convolutions of the same shape. Together the stages compress
//! time by `r_t` and space by `r_s`.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Var};
use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint, CheckpointHeader};
use crate::data::{CorpusManifest, VideoTensor};
use crate::error::{MebtError, Result};
use crate::nn::{init_std, Fwd, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::tensor_io::Array;

pub const CHECKPOINT_KIND: &str = "vq_tokenizer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub r_t: usize,
    pub r_s: usize,
    /// Codebook size `U`.
    pub codebook_size: usize,
    /// Code width `d`.
    pub code_dim: usize,
    pub beta_vq: f64,
    /// Channel width of the intermediate conv stages.
    pub width: usize,
    pub channels: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            r_t: 4,
            r_s: 8,
            codebook_size: 64,
            code_dim: 64,
            beta_vq: 0.25,
            width: 64,
            channels: 3,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_t == 0 || self.r_s == 0 {
            return Err(MebtError::config("compression ratios must be positive"));
        }
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return Err(MebtError::config("codebook_size must be in 2..=65536"));
        }
        if self.code_dim == 0 || self.width == 0 {
            return Err(MebtError::config("code_dim and width must be positive"));
        }
        if self.beta_vq.is_nan() || self.beta_vq <= 0.0 {
            return Err(MebtError::config("beta_vq must be positive"));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(MebtError::config("channels must be 1 or 3"));
        }
        Ok(())
    }

    /// Per-stage `(temporal, spatial)` strides whose products are
    /// `(r_t, r_s)`.
    pub fn stage_strides(&self) -> [(usize, usize); 3] {
        let t = split_factor(self.r_t);
        let s = split_factor(self.r_s);
        [(t[0], s[0]), (t[1], s[1]), (t[2], s[2])]
    }

    pub fn token_dims(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if !frames.is_multiple_of(self.r_t) || !height.is_multiple_of(self.r_s) || !width.is_multiple_of(self.r_s) {
            return Err(MebtError::config(format!(
                "video {frames}x{height}x{width} is not divisible by (r_t={}, r_s={})",
                self.r_t, self.r_s
            )));
        }
        Ok((frames / self.r_t, height / self.r_s, width / self.r_s))
    }
}

/// Distributes the prime factors of `r` over three stages, largest first,
/// always onto the stage with the smallest product so far; the result is
/// sorted descending so the earliest stage downsamples the most.
fn split_factor(mut r: usize) -> [usize; 3] {
    let mut primes = Vec::new();
    let mut p = 2;
    while r > 1 {
        while r.is_multiple_of(p) {
            primes.push(p);
            r /= p;
        }
        p += 1;
    }
    primes.sort_unstable_by(|a, b| b.cmp(a));
    let mut stages = [1usize; 3];
    for prime in primes {
        let (i, _) = stages.iter().enumerate().min_by_key(|(_, &v)| v).unwrap();
        stages[i] *= prime;
    }
    stages.sort_unstable_by(|a, b| b.cmp(a));
    stages
}

/// Discrete representation `y` of a video: `t x h x w` codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub vocab: usize,
    pub indices: Vec<u16>,
}

impl TokenGrid {
    pub fn new(t: usize, h: usize, w: usize, vocab: usize, indices: Vec<u16>) -> Result<Self> {
        if indices.len() != t * h * w {
            return Err(MebtError::data(format!(
                "{} indices for a {t}x{h}x{w} grid",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= vocab) {
            return Err(MebtError::data(format!("token {bad} outside vocabulary {vocab}")));
        }
        Ok(Self {
            t,
            h,
            w,
            vocab,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Raster position of `(frame, row, col)`.
    pub fn position(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    pub fn to_array(&self) -> Array {
        Array::u16(vec![self.t, self.h, self.w], self.indices.clone()).expect("grid dims are consistent")
    }

    pub fn from_array(array: &Array, vocab: usize) -> Result<Self> {
        let data = array
            .as_u16()
            .ok_or_else(|| MebtError::data("token grids must be u16"))?;
        match array.dims.as_slice() {
            [t, h, w] => Self::new(*t, *h, *w, vocab, data.to_vec()),
            _ => Err(MebtError::data("token grids must have rank 3")),
        }
    }
}

/// Nearest-code assignment by squared Euclidean distance; the lowest index
/// wins ties. Returns the indices and the selected code rows.
pub fn quantize(h: &Tensor, codebook: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    if h.cols() != codebook.cols() {
        return Err(MebtError::data(format!(
            "embedding width {} does not match code width {}",
            h.cols(),
            codebook.cols()
        )));
    }
    let mut indices = Vec::with_capacity(h.rows());
    let mut out = Tensor::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        let row = h.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for u in 0..codebook.rows() {
            let d: f64 = row.iter().zip(codebook.row(u)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
        indices.push(best);
        out.row_mut(i).copy_from_slice(codebook.row(best));
    }
    Ok((indices, out))
}

/// The three terms of the quantization objective plus their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqLoss {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "shape mismatch");
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// `‖x − x̂‖² + ‖sg(h) − y‖² + β‖sg(y) − h‖²`, each term a mean over elements.
/// Stop-gradients do not change values, so the codebook and commitment terms
/// share a magnitude.
pub fn vq_loss(x: &Tensor, x_hat: &Tensor, h: &Tensor, y_emb: &Tensor, beta_vq: f64) -> VqLoss {
    let recon = mean_sq_diff(x.data(), x_hat.data());
    let q = mean_sq_diff(h.data(), y_emb.data());
    let commit = beta_vq * q;
    VqLoss {
        total: recon + q + commit,
        recon,
        codebook: q,
        commit,
    }
}

/// Flat index map turning a `t x h x w x c` grid (raster rows, channel
/// columns) into non-overlapping `(st, ss, ss)` patches.
fn patchify_map(dims: (usize, usize, usize, usize), st: usize, ss: usize) -> Vec<usize> {
    let (t, h, w, c) = dims;
    let (to, ho, wo) = (t / st, h / ss, w / ss);
    let mut map = Vec::with_capacity(t * h * w * c);
    for a in 0..to {
        for b in 0..ho {
            for d in 0..wo {
                for dt in 0..st {
                    for dy in 0..ss {
                        for dx in 0..ss {
                            let base = (((a * st + dt) * h + b * ss + dy) * w + d * ss + dx) * c;
                            map.extend(base..base + c);
                        }
                    }
                }
            }
        }
    }
    map
}

fn invert(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &src) in map.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

#[derive(Clone, Debug)]
struct Layers {
    enc: Vec<Linear>,
    enc_proj: Linear,
    dec_in: Linear,
    dec: Vec<Linear>,
    codebook: ParamId,
}

/// Graph nodes of one forward pass through the autoencoder.
pub struct VqForward {
    pub h: Var,
    pub y_emb: Var,
    pub x_hat: Var,
    pub indices: Vec<usize>,
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub store: ParamStore,
    layers: Layers,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let strides = config.stage_strides();
        let (c, wd) = (config.channels, config.width);
        let mut enc = Vec::new();
        let mut c_in = c;
        for (i, &(st, ss)) in strides.iter().enumerate() {
            enc.push(Linear::new(
                &mut store,
                &format!("enc{i}"),
                st * ss * ss * c_in,
                wd,
                &mut rng,
            ));
            c_in = wd;
        }
        let enc_proj = Linear::new(&mut store, "enc_proj", wd, config.code_dim, &mut rng);
        let dec_in = Linear::new(&mut store, "dec_in", config.code_dim, wd, &mut rng);
        let mut dec = Vec::new();
        for (i, &(st, ss)) in strides.iter().enumerate().rev() {
            let c_out = if i == 0 { c } else { wd };
            dec.push(Linear::new(
                &mut store,
                &format!("dec{i}"),
                wd,
                st * ss * ss * c_out,
                &mut rng,
            ));
        }
        let codebook = store.add(
            "codebook",
            Tensor::randn(
                config.codebook_size,
                config.code_dim,
                init_std(config.code_dim),
                &mut rng,
            ),
        );
        Ok(Self {
            config,
            store,
            layers: Layers {
                enc,
                enc_proj,
                dec_in,
                dec,
                codebook,
            },
        })
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.layers.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layers.codebook
    }

    fn check_video(&self, v: &VideoTensor) -> Result<(usize, usize, usize)> {
        if v.channels != self.config.channels {
            return Err(MebtError::config(format!(
                "video has {} channels, tokenizer expects {}",
                v.channels, self.config.channels
            )));
        }
        self.config.token_dims(v.frames, v.height, v.width)
    }

    pub fn video_tensor(v: &VideoTensor) -> Tensor {
        Tensor::from_vec(
            v.frames * v.height * v.width,
            v.channels,
            v.data.iter().map(|&x| x as f64).collect(),
        )
    }

    /// Encoder graph: `T*H*W x C` pixels to `t*h*w x d` embeddings.
    pub fn encode_var(&self, fx: &mut Fwd, x: Var, dims: (usize, usize, usize)) -> Var {
        let (mut t, mut h, mut w) = dims;
        let mut c = self.config.channels;
        let mut cur = x;
        for (layer, &(st, ss)) in self.layers.enc.iter().zip(self.config.stage_strides().iter()) {
            let map = patchify_map((t, h, w, c), st, ss);
            (t, h, w) = (t / st, h / ss, w / ss);
            let cols = st * ss * ss * c;
            let patches = fx.tape.permute(cur, Rc::new(map), t * h * w, cols);
            let y = layer.forward(fx, patches);
            cur = fx.tape.gelu(y);
            c = self.config.width;
        }
        self.layers.enc_proj.forward(fx, cur)
    }

    /// Decoder graph: `t*h*w x d` code embeddings to `T*H*W x C` pixels
    /// (unclamped).
    pub fn decode_var(&self, fx: &mut Fwd, emb: Var, token_dims: (usize, usize, usize)) -> Var {
        let (mut t, mut h, mut w) = token_dims;
        let strides = self.config.stage_strides();
        let y = self.layers.dec_in.forward(fx, emb);
        let mut cur = fx.tape.gelu(y);
        for (k, layer) in self.layers.dec.iter().enumerate() {
            let stage = strides.len() - 1 - k;
            let (st, ss) = strides[stage];
            let c_out = if stage == 0 {
                self.config.channels
            } else {
                self.config.width
            };
            let patches = layer.forward(fx, cur);
            let (tn, hn, wn) = (t * st, h * ss, w * ss);
            let map = invert(&patchify_map((tn, hn, wn, c_out), st, ss));
            cur = fx.tape.permute(patches, Rc::new(map), tn * hn * wn, c_out);
            if stage != 0 {
                cur = fx.tape.gelu(cur);
            }
            (t, h, w) = (tn, hn, wn);
        }
        cur
    }

    /// Continuous embeddings `h = E(x)` of shape `(t*h*w) x d`.
    pub fn encode(&self, video: &VideoTensor) -> Result<Tensor> {
        self.check_video(video)?;
        let mut fx = Fwd::eval(&self.store);
        let x = fx.tape.input(Self::video_tensor(video));
        let h = self.encode_var(&mut fx, x, (video.frames, video.height, video.width));
        let out = fx.tape.value(h).clone();
        if !out.all_finite() {
            return Err(MebtError::Numeric {
                layer: 0,
                msg: "non-finite encoder output".into(),
            });
        }
        Ok(out)
    }

    pub fn quantize(&self, h: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        quantize(h, self.codebook())
    }

    pub fn tokenize(&self, video: &VideoTensor) -> Result<TokenGrid> {
        let (t, h, w) = self.check_video(video)?;
        let emb = self.encode(video)?;
        let (idx, _) = self.quantize(&emb)?;
        TokenGrid::new(
            t,
            h,
            w,
            self.config.codebook_size,
            idx.into_iter().map(|i| i as u16).collect(),
        )
    }

    /// Reconstruction `x̂ = D(y)` clamped to `[0, 1]`.
    pub fn decode_tokens(&self, tokens: &TokenGrid) -> Result<VideoTensor> {
        let u = self.config.codebook_size;
        if let Some(bad) = tokens.indices.iter().find(|&&i| i as usize >= u) {
            return Err(MebtError::data(format!("token {bad} outside codebook of size {u}")));
        }
        let mut fx = Fwd::eval(&self.store);
        let cb = fx.p(self.layers.codebook);
        let ids = Rc::new(tokens.indices.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let emb = fx.tape.gather_rows(cb, ids);
        let out = self.decode_var(&mut fx, emb, (tokens.t, tokens.h, tokens.w));
        let (frames, height, width) = (
            tokens.t * self.config.r_t,
            tokens.h * self.config.r_s,
            tokens.w * self.config.r_s,
        );
        let data = fx
            .tape
            .value(out)
            .data()
            .iter()
            .map(|&v| v.clamp(0.0, 1.0) as f32)
            .collect();
        Ok(VideoTensor {
            frames,
            height,
            width,
            channels: self.config.channels,
            data,
            frame_rate: 8,
        })
    }

    /// Full training graph: encode, quantize, straight-through decode and
    /// the three loss terms.
    pub fn forward_loss(&self, fx: &mut Fwd, video: &VideoTensor) -> Result<VqForward> {
        let (t, h, w) = self.check_video(video)?;
        let x = fx.tape.input(Self::video_tensor(video));
        let hv = self.encode_var(fx, x, (video.frames, video.height, video.width));
        let (indices, _) = quantize(fx.tape.value(hv), self.codebook())?;
        let cb = fx.p(self.layers.codebook);
        let y_emb = fx.tape.gather_rows(cb, Rc::new(indices.clone()));
        let y_const = fx.tape.detach(y_emb);
        let st = fx.tape.straight_through(hv, y_const);
        let x_hat = self.decode_var(fx, st, (t, h, w));
        let diff = fx.tape.sub(x, x_hat);
        let recon = fx.tape.mean_square(diff);
        let h_const = fx.tape.detach(hv);
        let cb_diff = fx.tape.sub(h_const, y_emb);
        let codebook = fx.tape.mean_square(cb_diff);
        let cm_diff = fx.tape.sub(y_const, hv);
        let commit_raw = fx.tape.mean_square(cm_diff);
        let beta = self.config.beta_vq;
        let commit = fx.tape.scale(commit_raw, beta);
        let total = fx.tape.weighted_sum(&[(recon, 1.0), (codebook, 1.0), (commit, 1.0)]);
        Ok(VqForward {
            h: hv,
            y_emb,
            x_hat,
            indices,
            total,
            recon,
            codebook,
            commit,
        })
    }

    /// Clamped reconstruction MSE of encode → quantize → decode.
    pub fn reconstruction_mse(&self, video: &VideoTensor) -> Result<f64> {
        let tokens = self.tokenize(video)?;
        Ok(self.decode_tokens(&tokens)?.mse(video))
    }

    pub fn header(&self, step: u64, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            step,
            seed,
            tensors: self.store.names().to_vec(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64) -> Result<()> {
        save_checkpoint(path, &self.header(step, seed), &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, store) = load_checkpoint(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(MebtError::data(format!(
                "expected a tokenizer checkpoint, got {}",
                header.kind
            )));
        }
        let config: TokenizerConfig = serde_json::from_value(header.config)?;
        let mut tok = Self::new(config, header.seed)?;
        restore_params(&mut tok.store, &store)?;
        Ok(tok)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Training clip length in frames; whole videos when `None`.
    pub clip_frames: Option<usize>,
    /// Seed the codebook with encoder outputs of random training clips
    /// before the first step.
    pub data_init: bool,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            lr: 2e-3,
            weight_decay: 0.0,
            clip_frames: Some(16),
            data_init: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLogRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub codes_used: usize,
}

fn random_clip<R: Rng>(video: &VideoTensor, clip: Option<usize>, r_t: usize, rng: &mut R) -> VideoTensor {
    match clip {
        Some(len) if len < video.frames => {
            let slots = (video.frames - len) / r_t;
            let start = rng.random_range(0..=slots) * r_t;
            video.slice_frames(start, len)
        }
        _ => video.clone(),
    }
}

/// Trains a fresh tokenizer on the corpus with AdamW, calling `log` after
/// every step.
pub fn train_tokenizer(
    manifest: &CorpusManifest,
    config: TokenizerConfig,
    train: &TokenizerTrainConfig,
    mut log: impl FnMut(&TokenizerLogRecord),
) -> Result<Tokenizer> {
    let videos = manifest.load_all()?;
    if videos.is_empty() {
        return Err(MebtError::config("corpus is empty"));
    }
    let mut tok = Tokenizer::new(config, train.seed)?;
    for v in &videos {
        let clip = train.clip_frames.unwrap_or(v.frames).min(v.frames);
        tok.check_video(&v.slice_frames(0, clip))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x70c1);
    if train.data_init && train.steps > 0 {
        init_codebook_from_data(&mut tok, &videos, train.clip_frames, &mut rng)?;
    }
    let mut opt = AdamW::new(
        &tok.store,
        AdamWConfig {
            lr: train.lr,
            weight_decay: train.weight_decay,
            ..Default::default()
        },
    );
    for step in 0..train.steps {
        let mut grads = crate::autograd::Grads::zeros_like(&tok.store);
        let mut rec = TokenizerLogRecord {
            step,
            total: 0.0,
            recon: 0.0,
            codebook: 0.0,
            commit: 0.0,
            codes_used: 0,
        };
        let mut used = vec![false; tok.config.codebook_size];
        let batch = train.batch.max(1);
        for _ in 0..batch {
            let v = &videos[rng.random_range(0..videos.len())];
            let clip = random_clip(v, train.clip_frames, tok.config.r_t, &mut rng);
            let mut fx = Fwd::eval(&tok.store);
            let out = tok.forward_loss(&mut fx, &clip)?;
            let val = |var| fx.tape.value(var).scalar_value();
            rec.total += val(out.total) / batch as f64;
            rec.recon += val(out.recon) / batch as f64;
            rec.codebook += val(out.codebook) / batch as f64;
            rec.commit += val(out.commit) / batch as f64;
            for &i in &out.indices {
                used[i] = true;
            }
            let total = out.total;
            let g = fx.tape.backward(total, &tok.store);
            grads.accumulate(g);
        }
        rec.codes_used = used.iter().filter(|&&u| u).count();
        if !rec.total.is_finite() || !grads.all_finite() {
            return Err(MebtError::NonFiniteLoss { step });
        }
        grads.scale(1.0 / batch as f64);
        grads.clip_global_norm(1.0);
        opt.step(&mut tok.store, &grads);
        log(&rec);
    }
    Ok(tok)
}

/// Replaces every code with the encoder output at a distinct random
/// position of random training clips.
fn init_codebook_from_data<R: Rng>(
    tok: &mut Tokenizer,
    videos: &[VideoTensor],
    clip: Option<usize>,
    rng: &mut R,
) -> Result<()> {
    let u = tok.config.codebook_size;
    let mut pool: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while pool.len() < 4 * u && attempts < 8 * videos.len().max(4) {
        let v = &videos[rng.random_range(0..videos.len())];
        let h = tok.encode(&random_clip(v, clip, tok.config.r_t, rng))?;
        pool.extend((0..h.rows()).map(|i| h.row(i).to_vec()));
        attempts += 1;
    }
    let id = tok.layers.codebook;
    let n = pool.len();
    for k in 0..u {
        // partial Fisher-Yates; rows repeat only when the pool is smaller than U
        let slot = k % n;
        if k < n {
            let j = rng.random_range(k..n);
            pool.swap(k, j);
        }
        let row: Vec<f64> = pool[slot].iter().map(|&v| v as f32 as f64).collect();
        tok.store.get_mut(id).row_mut(k).copy_from_slice(&row);
    }
    Ok(())
}

/// Number of distinct codes used when tokenizing `videos`.
pub fn codebook_usage(tok: &Tokenizer, videos: &[VideoTensor]) -> Result<usize> {
    let mut used = vec![false; tok.config.codebook_size];
    for v in videos {
        for &i in &tok.tokenize(v)?.indices {
            used[i as usize] = true;
        }
    }
    Ok(used.iter().filter(|&&u| u).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_video, SceneSpec};

    #[test]
    fn stage_strides_multiply_to_ratios() {
        let cfg = TokenizerConfig::default();
        assert_eq!(cfg.stage_strides(), [(2, 2), (2, 2), (1, 2)]);
        assert_eq!(split_factor(1), [1, 1, 1]);
        assert_eq!(split_factor(12), [3, 2, 2]);
        assert_eq!(split_factor(16), [4, 2, 2]);
    }

    #[test]
    fn encode_shapes_follow_compression() {
        let tok = Tokenizer::new(
            TokenizerConfig {
                width: 8,
                code_dim: 6,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let v = gen_synthetic_video(&SceneSpec::default(), 16, 1).unwrap();
        let h = tok.encode(&v).unwrap();
        assert_eq!(h.shape(), (4 * 4 * 4, 6));
        assert!(h.all_finite());

        let spec = SceneSpec {
            canvas: (8, 8),
            sprite_size: 3,
            ..Default::default()
        };
        let v = gen_synthetic_video(&spec, 4, 1).unwrap();
        assert_eq!(tok.encode(&v).unwrap().shape(), (1, 6));

        let v = gen_synthetic_video(&SceneSpec::default(), 15, 1).unwrap();
        assert!(matches!(tok.encode(&v), Err(MebtError::Config(_))));
    }

    #[test]
    fn quantize_edge_cases() {
        let h = Tensor::from_vec(2, 2, vec![5.0, -3.0, 0.1, 0.2]);
        let single = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        assert_eq!(quantize(&h, &single).unwrap().0, vec![0, 0]);

        let codes = Tensor::from_vec(4, 1, vec![0.0, -1.0, 1.0, 7.0]);
        let exact = Tensor::from_vec(1, 1, vec![7.0]);
        let (idx, q) = quantize(&exact, &codes).unwrap();
        assert_eq!(idx, vec![3]);
        assert_eq!(q.data(), &[7.0]);

        let tie = Tensor::from_vec(1, 1, vec![0.0]);
        let codes = Tensor::from_vec(3, 1, vec![5.0, -1.0, 1.0]);
        assert_eq!(quantize(&tie, &codes).unwrap().0, vec![1]);

        assert!(quantize(&h, &codes).is_err());
    }

    #[test]
    fn decode_tokens_shape_and_bounds() {
        let tok = Tokenizer::new(
            TokenizerConfig {
                width: 8,
                code_dim: 4,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let grid = TokenGrid::new(4, 4, 4, 64, vec![7; 64]).unwrap();
        let v = tok.decode_tokens(&grid).unwrap();
        assert_eq!(v.dims(), [16, 32, 32, 3]);
        assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));

        let bad = TokenGrid {
            t: 1,
            h: 1,
            w: 1,
            vocab: 65,
            indices: vec![64],
        };
        assert!(matches!(tok.decode_tokens(&bad), Err(MebtError::Data(_))));
        assert!(TokenGrid::new(1, 1, 1, 64, vec![64]).is_err());
    }

    #[test]
    fn vq_loss_closed_forms() {
        let x = Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        let h = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let l = vq_loss(&x, &x, &h, &h, 0.25);
        assert_eq!(l.total, 0.0);

        let y = Tensor::from_vec(1, 2, vec![1.5, 1.0]);
        let q = (0.25 + 1.0) / 2.0;
        let l = vq_loss(&x, &x, &h, &y, 0.25);
        assert!((l.total - 1.25 * q).abs() < 1e-15);
        assert!((l.total - (l.recon + l.codebook + l.commit)).abs() <= 1e-6 * l.total);
    }

    #[test]
    fn patchify_round_trips() {
        let map = patchify_map((4, 4, 6, 2), 2, 2);
        let inv = invert(&map);
        let mut sorted = map.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..map.len()).collect::<Vec<_>>());
        for (i, &m) in map.iter().enumerate() {
            assert_eq!(inv[m], i);
        }
    }

    #[test]
    fn graph_loss_matches_plain_loss_and_decomposes() {
        let tok = Tokenizer::new(
            TokenizerConfig {
                width: 8,
                code_dim: 4,
                codebook_size: 8,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let v = gen_synthetic_video(&SceneSpec::default(), 8, 2).unwrap();
        let mut fx = Fwd::eval(&tok.store);
        let out = tok.forward_loss(&mut fx, &v).unwrap();
        let plain = vq_loss(
            &Tokenizer::video_tensor(&v),
            fx.tape.value(out.x_hat),
            fx.tape.value(out.h),
            fx.tape.value(out.y_emb),
            0.25,
        );
        let total = fx.tape.value(out.total).scalar_value();
        assert!((total - plain.total).abs() <= 1e-12 * total.abs().max(1.0));
        let sum = fx.tape.value(out.recon).scalar_value()
            + fx.tape.value(out.codebook).scalar_value()
            + fx.tape.value(out.commit).scalar_value();
        assert!((total - sum).abs() <= 1e-6 * total.abs());
    }

    #[test]
    fn quantization_is_idempotent_on_codes() {
        let tok = Tokenizer::new(
            TokenizerConfig {
                width: 8,
                code_dim: 4,
                codebook_size: 16,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let v = gen_synthetic_video(&SceneSpec::default(), 8, 2).unwrap();
        let h = tok.encode(&v).unwrap();
        let (idx, y) = tok.quantize(&h).unwrap();
        let (idx2, y2) = tok.quantize(&y).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(y, y2);
    }
}
