//! Quality drift over time: iterative MeBT decoding against raster-order
//! autoregressive sampling at matched capacity.

use serde::{Deserialize, Serialize};

use super::{quality_over_time, FeatureExtractor, QualityCurve};
use crate::data::VideoTensor;
use crate::error::{MebtError, Result};
use crate::model::{ArModel, MebtModel};
use crate::sampler::{generate, sample_ar, DecodeConfig};
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub tokens: usize,
    pub mebt: QualityCurve,
    pub ar: QualityCurve,
    /// Model forwards per generated video.
    pub mebt_forwards: Vec<usize>,
    pub ar_forwards: Vec<usize>,
}

impl DriftReport {
    /// `(mebt, ar)` change of the last window relative to the first.
    pub fn final_delta(&self) -> (f64, f64) {
        let last = |c: &QualityCurve| c.delta.last().copied().unwrap_or(0.0);
        (last(&self.mebt), last(&self.ar))
    }
}

/// Draws `samples` videos from each model (sample `i` uses seed
/// `decode.seed + i`), decodes them with the tokenizer and compares their
/// per-window feature distributions with `reference`.
#[allow(clippy::too_many_arguments)]
pub fn compare_drift(
    mebt: &MebtModel,
    ar: &ArModel,
    tokenizer: &Tokenizer,
    extractor: &FeatureExtractor,
    reference: &[VideoTensor],
    decode: &DecodeConfig,
    samples: usize,
    stride: usize,
) -> Result<DriftReport> {
    if samples < 2 {
        return Err(MebtError::config("drift needs at least two samples per model"));
    }
    if mebt.config.grid != ar.config.grid || mebt.config.vocab != ar.config.vocab {
        return Err(MebtError::config("MeBT and AR models must share grid and vocabulary"));
    }
    let (mut mv, mut av) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
    let (mut mf, mut af) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
    for i in 0..samples {
        let seed = decode.seed.wrapping_add(i as u64);
        let m = generate(mebt, &DecodeConfig { seed, ..decode.clone() })?;
        mv.push(tokenizer.decode_tokens(&m.tokens)?);
        mf.push(m.forwards);
        let a = sample_ar(ar, decode.top_k, seed)?;
        av.push(tokenizer.decode_tokens(&a.tokens)?);
        af.push(a.forwards);
    }
    let window = extractor.config.window;
    Ok(DriftReport {
        tokens: mebt.config.n_max(),
        mebt: quality_over_time(&mv, extractor, window, stride, reference)?,
        ar: quality_over_time(&av, extractor, window, stride, reference)?,
        mebt_forwards: mf,
        ar_forwards: af,
    })
}
