//! Deterministic moving-sprite videos and on-disk corpora.
//!
//! Sprites move on integer pixel positions and reflect off the canvas walls.
//! Each sprite's color walks through the palette with a fixed period, so the
//! color at frame `k` always equals the color at frame `k + period`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MebtError, Result};
use crate::tensor_io::{read_tensor, write_tensor, Array};

/// A `T x H x W x C` video with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub frame_rate: u32,
}

impl VideoTensor {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
            frame_rate: 8,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Frames `start..start + len` as a new video.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let fl = self.frame_len();
        Self {
            frames: len,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[start * fl..(start + len) * fl].to_vec(),
            frame_rate: self.frame_rate,
        }
    }

    pub fn to_array(&self) -> Array {
        Array::f32(self.dims().to_vec(), self.data.clone()).expect("video dims are consistent")
    }

    pub fn from_array(array: &Array) -> Result<Self> {
        let data = array
            .as_f32()
            .ok_or_else(|| MebtError::data("video tensors must be f32"))?;
        let [t, h, w, c]: [usize; 4] = array
            .dims
            .clone()
            .try_into()
            .map_err(|_| MebtError::data("video tensors must have rank 4"))?;
        if t == 0 || !(c == 1 || c == 3) {
            return Err(MebtError::data(format!("invalid video dims {:?}", array.dims)));
        }
        Ok(Self {
            frames: t,
            height: h,
            width: w,
            channels: c,
            data: data.to_vec(),
            frame_rate: 8,
        })
    }

    pub fn mse(&self, other: &VideoTensor) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_sprites: usize,
    pub sprite_size: usize,
    pub palette: Vec<[f32; 3]>,
    /// Frames per full color cycle.
    pub period: usize,
    pub bounce: bool,
    /// `(height, width)`.
    pub canvas: (usize, usize),
    pub channels: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_sprites: 2,
            sprite_size: 8,
            palette: vec![[0.95, 0.2, 0.2], [0.2, 0.9, 0.3], [0.25, 0.35, 0.95], [0.95, 0.85, 0.2]],
            period: 16,
            bounce: true,
            canvas: (32, 32),
            channels: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if self.num_sprites == 0 {
            return Err(MebtError::config("num_sprites must be at least 1"));
        }
        if self.sprite_size == 0 || self.sprite_size >= h.min(w) {
            return Err(MebtError::config(format!(
                "sprite_size {} must be in 1..{}",
                self.sprite_size,
                h.min(w)
            )));
        }
        if self.period < 2 {
            return Err(MebtError::config("period must be at least 2"));
        }
        if self.palette.is_empty() {
            return Err(MebtError::config("palette must not be empty"));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(MebtError::config("channels must be 1 or 3"));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MebtError::config("palette values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Palette index of a sprite with color phase `phase` at frame `k`.
    pub fn color_index(&self, k: usize, phase: usize) -> usize {
        ((k + phase) % self.period) * self.palette.len() / self.period
    }
}

/// Per-frame sprite state, recorded during generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpriteState {
    pub y: usize,
    pub x: usize,
    pub color: usize,
}

/// Sprite states indexed `[frame][sprite]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneTrace {
    pub frames: Vec<Vec<SpriteState>>,
}

fn background(y: usize, x: usize, c: usize, h: usize, w: usize) -> f32 {
    let fy = y as f32 / (h.max(2) - 1) as f32;
    let fx = x as f32 / (w.max(2) - 1) as f32;
    0.3 + 0.25 * fy + 0.05 * fx - 0.05 * c as f32
}

fn reflect(mut p: i64, mut v: i64, max: i64) -> (i64, i64) {
    p += v;
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

pub fn gen_synthetic_video(spec: &SceneSpec, length: usize, seed: u64) -> Result<VideoTensor> {
    gen_synthetic_video_traced(spec, length, seed).map(|(v, _)| v)
}

/// Generates a video and the sprite trajectory that produced it.
pub fn gen_synthetic_video_traced(spec: &SceneSpec, length: usize, seed: u64) -> Result<(VideoTensor, SceneTrace)> {
    spec.validate()?;
    if length == 0 {
        return Err(MebtError::config("length must be at least 1"));
    }
    let (h, w) = spec.canvas;
    let c = spec.channels;
    let size = spec.sprite_size;
    let (max_y, max_x) = ((h - size) as i64, (w - size) as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speeds = [-2i64, -1, 1, 2];

    struct Sprite {
        y: i64,
        x: i64,
        vy: i64,
        vx: i64,
        phase: usize,
    }
    let mut sprites: Vec<Sprite> = (0..spec.num_sprites)
        .map(|_| Sprite {
            y: rng.random_range(0..=max_y),
            x: rng.random_range(0..=max_x),
            vy: speeds[rng.random_range(0..speeds.len())],
            vx: speeds[rng.random_range(0..speeds.len())],
            phase: rng.random_range(0..spec.period),
        })
        .collect();

    let mut video = VideoTensor::zeros(length, h, w, c);
    let mut trace = SceneTrace {
        frames: Vec::with_capacity(length),
    };
    for k in 0..length {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = video.index(k, y, x, ch);
                    video.data[i] = background(y, x, ch, h, w);
                }
            }
        }
        let states: Vec<SpriteState> = sprites
            .iter()
            .map(|s| SpriteState {
                y: s.y as usize,
                x: s.x as usize,
                color: spec.color_index(k, s.phase),
            })
            .collect();
        // sprite 0 is painted last so it is never occluded
        for st in states.iter().rev() {
            let rgb = spec.palette[st.color];
            let lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            for dy in 0..size {
                for dx in 0..size {
                    let (y, x) = ((st.y + dy) % h, (st.x + dx) % w);
                    for ch in 0..c {
                        let i = video.index(k, y, x, ch);
                        video.data[i] = if c == 1 { lum } else { rgb[ch] };
                    }
                }
            }
        }
        trace.frames.push(states);
        for s in sprites.iter_mut() {
            if spec.bounce {
                (s.y, s.vy) = reflect(s.y, s.vy, max_y);
                (s.x, s.vx) = reflect(s.x, s.vx, max_x);
            } else {
                s.y = (s.y + s.vy).rem_euclid(h as i64);
                s.x = (s.x + s.vx).rem_euclid(w as i64);
            }
        }
    }
    Ok((video, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    pub split: Split,
    pub seed: u64,
    pub scene: SceneSpec,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| MebtError::io(&path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text)?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn entry_path(&self, entry: &CorpusEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_video(&self, index: usize) -> Result<VideoTensor> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| MebtError::data(format!("no corpus entry {index}")))?;
        VideoTensor::from_array(&read_tensor(self.entry_path(entry))?)
    }

    pub fn load_all(&self) -> Result<Vec<VideoTensor>> {
        (0..self.entries.len()).map(|i| self.load_video(i)).collect()
    }

    /// Regenerates the sprite trace of an entry from its seed.
    pub fn trace(&self, index: usize) -> Result<SceneTrace> {
        let e = &self.entries[index];
        gen_synthetic_video_traced(&self.scene, e.t, e.seed).map(|(_, t)| t)
    }
}

/// Writes `count` videos to `out_dir` with per-entry seeds `seed + i` and
/// lengths cycling through `lengths`.
pub fn build_corpus(
    spec: &SceneSpec,
    count: usize,
    lengths: &[usize],
    out_dir: impl AsRef<Path>,
    seed: u64,
    split: Split,
) -> Result<CorpusManifest> {
    if count == 0 {
        return Err(MebtError::config("count must be at least 1"));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(MebtError::config("lengths must be non-empty and positive"));
    }
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| MebtError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let entry_seed = seed + i as u64;
        let length = lengths[i % lengths.len()];
        let video = gen_synthetic_video(spec, length, entry_seed)?;
        let name = format!("video_{i:05}.mbt");
        write_tensor(out_dir.join(&name), &video.to_array())?;
        entries.push(CorpusEntry {
            path: name,
            t: video.frames,
            h: video.height,
            w: video.width,
            c: video.channels,
            seed: entry_seed,
        });
    }
    let manifest = CorpusManifest {
        entries,
        split,
        seed,
        scene: spec.clone(),
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| MebtError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_gives_bitwise_identical_video() {
        let spec = SceneSpec::default();
        let a = gen_synthetic_video(&spec, 16, 7).unwrap();
        let b = gen_synthetic_video(&spec, 16, 7).unwrap();
        assert_eq!(a.data.len(), 16 * 32 * 32 * 3);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn color_repeats_with_period() {
        let spec = SceneSpec {
            period: 8,
            ..Default::default()
        };
        let (_, trace) = gen_synthetic_video_traced(&spec, 32, 0).unwrap();
        for s in 0..spec.num_sprites {
            let c0 = trace.frames[0][s].color;
            for k in [8, 16, 24] {
                assert_eq!(trace.frames[k][s].color, c0);
            }
        }
    }

    #[test]
    fn single_frame_is_in_unit_range() {
        let v = gen_synthetic_video(&SceneSpec::default(), 1, 3).unwrap();
        assert_eq!(v.dims(), [1, 32, 32, 3]);
        assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn oversized_sprite_is_a_config_error() {
        let spec = SceneSpec {
            sprite_size: 32,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic_video(&spec, 4, 0), Err(MebtError::Config(_))));
        let spec = SceneSpec {
            period: 1,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn grayscale_and_wrapping_scenes_generate() {
        let spec = SceneSpec {
            channels: 1,
            bounce: false,
            ..Default::default()
        };
        let v = gen_synthetic_video(&spec, 20, 11).unwrap();
        assert_eq!(v.dims(), [20, 32, 32, 1]);
        assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn video_round_trips_through_tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = gen_synthetic_video(&SceneSpec::default(), 16, 5).unwrap();
        let path = dir.path().join("v.mbt");
        write_tensor(&path, &v.to_array()).unwrap();
        let back = VideoTensor::from_array(&read_tensor(&path).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn corpus_seeds_and_rebuild_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let m = build_corpus(&spec, 4, &[16], dir.path().join("a"), 0, Split::Train).unwrap();
        let seeds: Vec<u64> = m.entries.iter().map(|e| e.seed).collect();
        assert_eq!(seeds, vec![0, 1, 2, 3]);
        let m2 = build_corpus(&spec, 4, &[16], dir.path().join("b"), 0, Split::Train).unwrap();
        assert_eq!(m.entries, m2.entries);
        for e in &m.entries {
            let a = std::fs::read(dir.path().join("a").join(&e.path)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&e.path)).unwrap();
            assert_eq!(a, b);
        }
        let loaded = CorpusManifest::load(dir.path().join("a")).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.load_all().unwrap().len(), 4);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_corpus(&SceneSpec::default(), 0, &[16], dir.path(), 0, Split::Train);
        assert!(matches!(r, Err(MebtError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sprite_region_color_is_periodic(seed in 0u64..10_000, period in 2usize..12, len in 1usize..40) {
            let spec = SceneSpec { period, ..Default::default() };
            let (v, trace) = gen_synthetic_video_traced(&spec, len + period, seed).unwrap();
            let region_mean = |k: usize| {
                let st = trace.frames[k][0];
                let mut acc = [0f64; 3];
                for dy in 0..spec.sprite_size {
                    for dx in 0..spec.sprite_size {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += v.get(k, st.y + dy, st.x + dx, c) as f64;
                        }
                    }
                }
                acc.map(|a| a / (spec.sprite_size * spec.sprite_size) as f64)
            };
            for k in 0..len {
                let (a, b) = (region_mean(k), region_mean(k + period));
                for c in 0..3 {
                    prop_assert!((a[c] - b[c]).abs() < 1e-6);
                }
            }
        }
    }
}
