//! Small frozen video classifier whose penultimate activations serve as
//! features for the Frechet comparisons.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore, Var};
use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint, CheckpointHeader};
use crate::data::{gen_synthetic_video_traced, CorpusManifest, SceneSpec, SceneTrace, VideoTensor};
use crate::error::{MebtError, Result};
use crate::nn::{Fwd, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const FEATURE_KIND: &str = "feature-extractor";
pub const ACCURACY_TARGET: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Frames per input window.
    pub window: usize,
    /// Spatial average-pooling factor.
    pub pool: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// `(height, width, channels)` of the input videos.
    pub frame: (usize, usize, usize),
    pub n_colors: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 16,
            pool: 4,
            hidden: 64,
            feature_dim: 8,
            frame: (32, 32, 3),
            n_colors: 4,
        }
    }
}

impl FeatureConfig {
    pub fn for_scene(scene: &SceneSpec) -> Self {
        Self {
            frame: (scene.canvas.0, scene.canvas.1, scene.channels),
            n_colors: scene.palette.len(),
            ..Default::default()
        }
    }

    fn input_dim(&self) -> usize {
        let (h, w, c) = self.frame;
        self.window * h.div_ceil(self.pool) * w.div_ceil(self.pool) * c
    }
}

/// `(color, quadrant)` of the leading sprite (smallest `y`, then `x`, then
/// index) at frame `k`.
pub fn window_labels(scene: &SceneSpec, trace: &SceneTrace, k: usize) -> (usize, usize) {
    let states = &trace.frames[k];
    let lead = (0..states.len())
        .min_by_key(|&i| (states[i].y, states[i].x, i))
        .expect("at least one sprite");
    let s = states[lead];
    let half = scene.sprite_size / 2;
    let lower = s.y + half >= scene.canvas.0 / 2;
    let right = s.x + half >= scene.canvas.1 / 2;
    (s.color, 2 * usize::from(lower) + usize::from(right))
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    color_head: Linear,
    quad_head: Linear,
    /// Held-out `(color, quadrant)` accuracy from training, if trained.
    pub accuracy: Option<(f64, f64)>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig, seed: u64) -> Result<Self> {
        if config.window == 0
            || config.pool == 0
            || config.hidden == 0
            || config.feature_dim == 0
            || config.n_colors == 0
        {
            return Err(MebtError::config("feature extractor sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", config.input_dim(), config.hidden, &mut rng);
        let l2 = Linear::new(&mut store, "l2", config.hidden, config.feature_dim, &mut rng);
        let color_head = Linear::new(&mut store, "color", config.feature_dim, config.n_colors, &mut rng);
        let quad_head = Linear::new(&mut store, "quadrant", config.feature_dim, 4, &mut rng);
        Ok(Self {
            config,
            store,
            l1,
            l2,
            color_head,
            quad_head,
            accuracy: None,
        })
    }

    /// Pooled, flattened input for frames `start..start + window`.
    pub fn input(&self, video: &VideoTensor, start: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (h, w, c) = cfg.frame;
        if (video.height, video.width, video.channels) != (h, w, c) {
            return Err(MebtError::config("video frame shape does not match the extractor"));
        }
        if start + cfg.window > video.frames {
            return Err(MebtError::config(format!(
                "window {}..{} exceeds {} frames",
                start,
                start + cfg.window,
                video.frames
            )));
        }
        let (ph, pw) = (h.div_ceil(cfg.pool), w.div_ceil(cfg.pool));
        let mut out = vec![0.0; cfg.input_dim()];
        let mut counts = vec![0.0; cfg.input_dim()];
        for k in 0..cfg.window {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let o = ((k * ph + y / cfg.pool) * pw + x / cfg.pool) * c + ch;
                        out[o] += video.get(start + k, y, x, ch) as f64;
                        counts[o] += 1.0;
                    }
                }
            }
        }
        out.iter_mut().zip(&counts).for_each(|(v, n)| *v = (*v / n - 0.5) * 2.0);
        Ok(out)
    }

    fn forward(&self, fx: &mut Fwd, x: Var) -> (Var, Var, Var) {
        let h = self.l1.forward(fx, x);
        let h = fx.tape.gelu(h);
        let f = self.l2.forward(fx, h);
        let f = fx.tape.gelu(f);
        let color = self.color_head.forward(fx, f);
        let quad = self.quad_head.forward(fx, f);
        (f, color, quad)
    }

    fn run(&self, inputs: Vec<f64>, rows: usize) -> (Tensor, Tensor, Tensor) {
        let mut fx = Fwd::eval(&self.store);
        let x = fx.tape.input(Tensor::from_vec(rows, self.config.input_dim(), inputs));
        let (f, c, q) = self.forward(&mut fx, x);
        (
            fx.tape.value(f).clone(),
            fx.tape.value(c).clone(),
            fx.tape.value(q).clone(),
        )
    }

    /// Penultimate activations for the window starting at `start`.
    pub fn features(&self, video: &VideoTensor, start: usize) -> Result<Vec<f64>> {
        let (f, _, _) = self.run(self.input(video, start)?, 1);
        Ok(f.row(0).to_vec())
    }

    /// Predicted `(color, quadrant)` classes.
    pub fn classify(&self, video: &VideoTensor, start: usize) -> Result<(usize, usize)> {
        let (_, c, q) = self.run(self.input(video, start)?, 1);
        Ok((c.argmax_row(0), q.argmax_row(0)))
    }

    pub fn header(&self, step: u64, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            kind: FEATURE_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            step,
            seed,
            tensors: self.store.names().to_vec(),
            extra: serde_json::json!({ "accuracy": self.accuracy }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64) -> Result<()> {
        save_checkpoint(path, &self.header(step, seed), &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, store) = load_checkpoint(path)?;
        if header.kind != FEATURE_KIND {
            return Err(MebtError::data(format!(
                "expected a {FEATURE_KIND} checkpoint, got {}",
                header.kind
            )));
        }
        let mut fe = Self::new(serde_json::from_value(header.config)?, header.seed)?;
        restore_params(&mut fe.store, &store)?;
        fe.accuracy = serde_json::from_value(header.extra["accuracy"].clone()).unwrap_or(None);
        Ok(fe)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

struct Labeled {
    video: VideoTensor,
    trace: SceneTrace,
}

fn load_labeled(manifest: &CorpusManifest) -> Result<Vec<Labeled>> {
    (0..manifest.entries.len())
        .map(|i| {
            Ok(Labeled {
                video: manifest.load_video(i)?,
                trace: manifest.trace(i)?,
            })
        })
        .collect()
}

/// Seeds of training clips start here, far from corpus entry seeds.
const CLIP_SEED_BASE: u64 = 1 << 48;

/// Trains on fresh clips drawn from `train`'s scene spec (a new seed per
/// clip) and measures accuracy on windows of `held_out` (stride 8).
/// Falling short of 90% is reported through `warn`, not as an error.
pub fn train_feature_extractor(
    train: &CorpusManifest,
    held_out: &CorpusManifest,
    train_config: &FeatureTrainConfig,
    mut warn: impl FnMut(&str),
) -> Result<FeatureExtractor> {
    let config = FeatureConfig::for_scene(&train.scene);
    let mut fe = FeatureExtractor::new(config, train_config.seed)?;
    let window = fe.config.window;
    let mut opt = AdamW::new(
        &fe.store,
        AdamWConfig {
            lr: train_config.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0xfea7);
    let dim = fe.config.input_dim();
    for step in 0..train_config.steps {
        let mut inputs = Vec::with_capacity(train_config.batch * dim);
        let (mut colors, mut quads) = (Vec::new(), Vec::new());
        for _ in 0..train_config.batch {
            let seed = CLIP_SEED_BASE + rng.random_range(0..1u64 << 40);
            let (video, trace) = gen_synthetic_video_traced(&train.scene, window, seed)?;
            inputs.extend(fe.input(&video, 0)?);
            let (c, q) = window_labels(&train.scene, &trace, 0);
            colors.push(c);
            quads.push(q);
        }
        let mut fx = Fwd::eval(&fe.store);
        let x = fx.tape.input(Tensor::from_vec(train_config.batch, dim, inputs));
        let (_, cl, ql) = fe.forward(&mut fx, x);
        let lc = fx.tape.cross_entropy(cl, Rc::new(colors));
        let lq = fx.tape.cross_entropy(ql, Rc::new(quads));
        let loss = fx.tape.weighted_sum(&[(lc, 1.0), (lq, 1.0)]);
        if !fx.tape.value(loss).scalar_value().is_finite() {
            return Err(MebtError::NonFiniteLoss { step });
        }
        let mut grads: Grads = fx.tape.backward(loss, &fe.store);
        grads.clip_global_norm(1.0);
        opt.step(&mut fe.store, &grads);
    }
    let held = load_labeled(held_out)?;
    let (mut hits_c, mut hits_q, mut total) = (0usize, 0usize, 0usize);
    for v in &held {
        let mut start = 0;
        while start + window <= v.video.frames {
            let (c, q) = fe.classify(&v.video, start)?;
            let (tc, tq) = window_labels(&held_out.scene, &v.trace, start);
            hits_c += usize::from(c == tc);
            hits_q += usize::from(q == tq);
            total += 1;
            start += 8;
        }
    }
    if total == 0 {
        return Err(MebtError::config("no held-out windows"));
    }
    let acc = (hits_c as f64 / total as f64, hits_q as f64 / total as f64);
    if acc.0 < ACCURACY_TARGET || acc.1 < ACCURACY_TARGET {
        warn(&format!(
            "feature extractor held-out accuracy (color {:.3}, quadrant {:.3}) is below {ACCURACY_TARGET}",
            acc.0, acc.1
        ));
    }
    fe.accuracy = Some(acc);
    Ok(fe)
}

/// Per-window Frechet distance against the reference videos' windows at
/// the same offsets, and its change relative to the first window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityCurve {
    pub starts: Vec<usize>,
    pub distance: Vec<f64>,
    pub delta: Vec<f64>,
}

pub fn window_starts(frames: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(MebtError::config("window and stride must be positive"));
    }
    if frames < window {
        return Err(MebtError::config(format!(
            "{frames} frames are shorter than the {window}-frame window"
        )));
    }
    Ok((0..=(frames - window) / stride).map(|i| i * stride).collect())
}

pub fn quality_over_time(
    videos: &[VideoTensor],
    extractor: &FeatureExtractor,
    window: usize,
    stride: usize,
    reference: &[VideoTensor],
) -> Result<QualityCurve> {
    if window != extractor.config.window {
        return Err(MebtError::config(format!(
            "extractor expects {}-frame windows",
            extractor.config.window
        )));
    }
    let frames = videos.iter().chain(reference).map(|v| v.frames).min().unwrap_or(0);
    let starts = window_starts(frames, window, stride)?;
    let feats = |set: &[VideoTensor], s: usize| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|v| extractor.features(v, s)).collect()
    };
    let mut distance = Vec::with_capacity(starts.len());
    for &s in &starts {
        distance.push(super::frechet_feature_distance(
            &feats(reference, s)?,
            &feats(videos, s)?,
        )?);
    }
    let delta = distance.iter().map(|d| d - distance[0]).collect();
    Ok(QualityCurve {
        starts,
        distance,
        delta,
    })
}
