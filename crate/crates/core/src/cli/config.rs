//! Run configuration: built-in defaults, then a JSON file, then dotted
//! `--set key=value` overrides. Keys that do not exist in the default tree
//! are rejected at every layer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bench_eval::FeatureTrainConfig;
use crate::data::SceneSpec;
use crate::error::{MebtError, Result};
use crate::model::{Backend, ModelConfig};
use crate::sampler::DecodeConfig;
use crate::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Mebt,
    /// Causal raster-order baseline.
    Ar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub scene: SceneSpec,
    pub count: usize,
    pub held_out: usize,
    pub lengths: Vec<usize>,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            count: 32,
            held_out: 8,
            lengths: vec![64],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSection {
    pub model: TokenizerConfig,
    pub train: TokenizerTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSection {
    pub count: usize,
    pub png_columns: usize,
    pub gif_zoom: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            count: 4,
            png_columns: 16,
            gif_zoom: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub backends: Vec<Backend>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub n_latent: usize,
    /// Token frame `(h, w)`; lengths must be multiples of `h * w`.
    pub frame: (usize, usize),
    /// Lengths whose estimated activations exceed this many bytes are
    /// recorded as failures instead of run.
    pub memory_budget: Option<u64>,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            backends: vec![Backend::Mebt, Backend::Full],
            lengths: vec![512, 1024, 2048, 4096],
            batch: 1,
            d_model: 16,
            num_heads: 1,
            num_layers: 2,
            n_latent: 32,
            frame: (8, 8),
            memory_budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub window: usize,
    pub stride: usize,
    /// Videos generated per model for drift.
    pub samples: usize,
    /// Mask draws per held-out grid for the NLL summary after training.
    pub nll_draws: usize,
    pub features: FeatureTrainConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            window: 16,
            stride: 8,
            samples: 8,
            nll_draws: 4,
            features: FeatureTrainConfig::default(),
        }
    }
}

/// Inputs produced by earlier commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub ar_model: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub samples: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub sample: SampleSection,
    pub bench: BenchSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        d.scene.validate()?;
        if d.count == 0 || d.held_out < 2 || d.lengths.is_empty() || d.lengths.contains(&0) {
            return Err(MebtError::config(
                "data needs count >= 1, held_out >= 2 and positive lengths",
            ));
        }
        self.tokenizer.model.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate(self.model.n_max(), self.model.vocab)?;
        if self.model.vocab != self.tokenizer.model.codebook_size {
            return Err(MebtError::config(format!(
                "model.vocab = {} but tokenizer.model.codebook_size = {}",
                self.model.vocab, self.tokenizer.model.codebook_size
            )));
        }
        let b = &self.bench;
        let frame = b.frame.0 * b.frame.1;
        if frame == 0 || b.lengths.len() < 2 || b.lengths.iter().any(|&l| l == 0 || l % frame != 0) {
            return Err(MebtError::config(format!(
                "bench.lengths must be at least two positive multiples of {frame}"
            )));
        }
        if b.batch == 0 || b.backends.is_empty() {
            return Err(MebtError::config(
                "bench needs a positive batch and at least one backend",
            ));
        }
        let e = &self.eval;
        if e.window == 0 || e.stride == 0 || e.samples < 2 || e.nll_draws == 0 {
            return Err(MebtError::config(
                "eval needs positive window, stride, nll_draws and samples >= 2",
            ));
        }
        if self.sample.count == 0 {
            return Err(MebtError::config("sample.count must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    File,
    Flag,
}

/// The merged configuration plus where each non-default leaf came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn merge(
    base: &mut Value,
    over: Value,
    prefix: &str,
    source: Source,
    prov: &mut BTreeMap<String, Source>,
) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| MebtError::config(format!("unknown config key `{key}`")))?;
                merge(slot, v, &key, source, prov)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            prov.insert(prefix.to_string(), source);
            Ok(())
        }
    }
}

/// Parses `key=value`; the value is read as JSON and falls back to a plain
/// string, so `train.curriculum=gaussian` works unquoted.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| MebtError::config(format!("override `{arg}` is not key=value")))?;
    if key.is_empty() {
        return Err(MebtError::config(format!("override `{arg}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn apply_override(tree: &mut Value, key: &str, value: Value, prov: &mut BTreeMap<String, Source>) -> Result<()> {
    let mut over = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), over);
        over = Value::Object(m);
    }
    merge(tree, over, "", Source::Flag, prov)
}

/// Defaults, then `file`, then each `sets` entry in order, then `seed`
/// written to `seed_key`. Any failure here is a configuration error.
pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<(&str, u64)>) -> Result<Resolved> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    let mut provenance = BTreeMap::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MebtError::config(format!("cannot read config {}: {e}", path.display())))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| MebtError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !over.is_object() {
            return Err(MebtError::config("config file must hold a JSON object"));
        }
        merge(&mut tree, over, "", Source::File, &mut provenance)?;
    }
    for s in sets {
        let (key, value) = parse_override(s)?;
        apply_override(&mut tree, &key, value, &mut provenance)?;
    }
    if let Some((key, s)) = seed {
        apply_override(&mut tree, key, Value::from(s), &mut provenance)?;
    }
    let config: RunConfig =
        serde_json::from_value(tree).map_err(|e| MebtError::config(format!("invalid config value: {e}")))?;
    config.validate()?;
    Ok(Resolved { config, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let r = resolve(None, &[], None).unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert!(r.provenance.is_empty());
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"decode": {"S": 8, "tau": 1.5}, "train": {"curriculum": "uniform"}}"#,
        )
        .unwrap();
        let sets = vec![
            "decode.S=12".to_string(),
            "train.curriculum=gaussian".to_string(),
            "decode.top_k=5".to_string(),
        ];
        let r = resolve(Some(&path), &sets, Some(("decode.seed", 7))).unwrap();
        assert_eq!(r.config.decode.steps, 12);
        assert_eq!(r.config.decode.tau, 1.5);
        assert_eq!(r.config.decode.top_k, Some(5));
        assert_eq!(r.config.decode.seed, 7);
        assert_eq!(r.config.train.curriculum, crate::schedules::Curriculum::Gaussian);
        assert_eq!(r.provenance["decode.tau"], Source::File);
        assert_eq!(r.provenance["decode.S"], Source::Flag);
        assert_eq!(r.provenance["decode.seed"], Source::Flag);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let cases = [
            "decode.nope=1",
            "nope=1",
            "decode.S.x=1",
            "decode.top_k=0",
            "decode.S=fast",
            "model.vocab=32",
            "noequals",
        ];
        for c in cases {
            let e = resolve(None, &[c.to_string()], None).unwrap_err();
            assert!(matches!(e, MebtError::Config(_)), "{c}: {e}");
        }
        let e = resolve(Some(Path::new("/definitely/missing.json")), &[], None).unwrap_err();
        assert!(matches!(e, MebtError::Config(_)));
    }

    #[test]
    fn snapshot_round_trips() {
        let r = resolve(
            None,
            &["bench.memory_budget=1000000".to_string(), "arch=ar".to_string()],
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        std::fs::write(&path, serde_json::to_string_pretty(&r.config).unwrap()).unwrap();
        let again = resolve(Some(&path), &[], None).unwrap();
        assert_eq!(again.config, r.config);
        assert_eq!(again.config.arch, Arch::Ar);
    }
}
