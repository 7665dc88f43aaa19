//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use std::rc::Rc;

use mebt::autograd::{Grads, ParamStore};
use mebt::data::VideoTensor;
use mebt::model::{Backend, MaskedBatch, MebtModel, ModelConfig};
use mebt::nn::Fwd;
use mebt::tokenizer::{Tokenizer, TokenizerConfig};
use mebt::trainer::mebt_loss;

pub const RTOL: f64 = 1e-4;
/// Absolute floor for gradients that are zero up to rounding.
pub const ATOL: f64 = 1e-9;
const EPS: f64 = 1e-5;

#[derive(Debug)]
pub struct FdSummary {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Central differences of `loss` over every scalar of every parameter,
/// compared with `grads`.
pub fn fd_compare(store: &mut ParamStore, grads: &Grads, mut loss: impl FnMut(&ParamStore) -> f64) -> FdSummary {
    let mut s = FdSummary {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + EPS;
            let up = loss(store);
            store.get_mut(id).data_mut()[k] = orig - EPS;
            let down = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (numeric - analytic).abs();
            let scale = numeric.abs().max(analytic.abs());
            if scale > ATOL {
                s.worst_rel = s.worst_rel.max(err / scale);
            }
            if err > RTOL * scale + ATOL {
                s.failures.push(format!(
                    "{}[{k}]: analytic {analytic:e} numeric {numeric:e}",
                    store.name(id)
                ));
            }
            s.checked += 1;
        }
    }
    s
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        n_latent: 2,
        grid: (2, 2, 3),
        vocab: 5,
        dropout: 0.0,
        backend: Backend::Mebt,
        window: 6,
    }
}

pub fn tiny_batch(with_context: bool) -> MaskedBatch {
    let context = if with_context {
        vec![(7, 1), (0, 4), (3, 2), (10, 0)]
    } else {
        vec![]
    };
    let masked = vec![1, 2, 5, 8, 11];
    MaskedBatch::new(context, masked, vec![0, 3, 1, 4, 2], (0, 2), 6).unwrap()
}

/// Masked-token loss gradient check on a 2-block, d_model 8, N_L 2 model.
pub fn fd_check_model(with_context: bool) -> FdSummary {
    let mut model = MebtModel::new(tiny_model_config(), 11).unwrap();
    let batch = tiny_batch(with_context);
    fn loss_of<'a>(store: &'a ParamStore, model: &MebtModel, batch: &MaskedBatch) -> (Fwd<'a>, mebt::autograd::Var) {
        let mut fx = Fwd::eval(store);
        let logits = model.forward(&mut fx, batch).unwrap();
        let l = mebt_loss(&mut fx, logits, &batch.targets).unwrap();
        (fx, l)
    }
    let grads = {
        let (fx, l) = loss_of(&model.store, &model, &batch);
        fx.tape.backward(l, &model.store)
    };
    let shadow = model.clone();
    fd_compare(&mut model.store, &grads, |store| {
        let (fx, l) = loss_of(store, &shadow, &batch);
        fx.tape.value(l).scalar_value()
    })
}

pub fn tiny_tokenizer() -> (Tokenizer, VideoTensor) {
    let config = TokenizerConfig {
        r_t: 1,
        r_s: 2,
        codebook_size: 4,
        code_dim: 3,
        beta_vq: 0.25,
        width: 3,
        channels: 1,
    };
    let tok = Tokenizer::new(config, 5).unwrap();
    let mut video = VideoTensor::zeros(1, 8, 8, 1);
    for (i, v) in video.data.iter_mut().enumerate() {
        *v = ((i * 37 % 23) as f32) / 23.0;
    }
    (tok, video)
}

/// Vector-quantization loss gradient check on a 1x4x4 token grid. The
/// straight-through estimator and stop-gradients are replaced by a smooth
/// surrogate with the same analytic gradient: indices, `h0` and `q0` are
/// frozen at the base point, the decoder sees `h(theta) + (q0 - h0)`, the
/// codebook term uses `h0`, and the commitment term uses `q0`.
pub fn fd_check_tokenizer() -> FdSummary {
    let (mut tok, video) = tiny_tokenizer();
    let (indices, h0, q0, grads) = {
        let mut fx = Fwd::eval(&tok.store);
        let f = tok.forward_loss(&mut fx, &video).unwrap();
        let h0 = fx.tape.value(f.h).clone();
        let q0 = fx.tape.value(f.y_emb).clone();
        let idx = f.indices.clone();
        (idx, h0, q0, fx.tape.backward(f.total, &tok.store))
    };
    let shift = {
        let mut d = q0.clone();
        d.data_mut().iter_mut().zip(h0.data()).for_each(|(q, h)| *q -= h);
        d
    };
    let dims = (video.frames, video.height, video.width);
    let token_dims = tok.config.token_dims(dims.0, dims.1, dims.2).unwrap();
    let beta = tok.config.beta_vq;
    let codebook_id = tok.codebook_id();
    let shadow = tok.clone();
    fd_compare(&mut tok.store, &grads, |store| {
        let mut fx = Fwd::eval(store);
        let x = fx.tape.input(Tokenizer::video_tensor(&video));
        let h = shadow.encode_var(&mut fx, x, dims);
        let s = fx.tape.input(shift.clone());
        let dec_in = fx.tape.add(h, s);
        let x_hat = shadow.decode_var(&mut fx, dec_in, token_dims);
        let diff = fx.tape.sub(x, x_hat);
        let recon = fx.tape.mean_square(diff);
        let cb = fx.p(codebook_id);
        let y = fx.tape.gather_rows(cb, Rc::new(indices.clone()));
        let hf = fx.tape.input(h0.clone());
        let cd = fx.tape.sub(hf, y);
        let codebook = fx.tape.mean_square(cd);
        let qf = fx.tape.input(q0.clone());
        let md = fx.tape.sub(qf, h);
        let commit = fx.tape.mean_square(md);
        let total = fx.tape.weighted_sum(&[(recon, 1.0), (codebook, 1.0), (commit, beta)]);
        fx.tape.value(total).scalar_value()
    })
}
