//! Exact attention-score counts per forward pass, from the layer
//! definitions of each backend.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    /// Query x key score entries, summed over heads and layers.
    pub score_entries: u64,
    /// Scores plus softmax probabilities plus one `d_model`-wide state per
    /// updated row per layer, in scalars.
    pub activations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mebt: AttentionCost,
    pub full: AttentionCost,
    pub axial: AttentionCost,
    pub window: AttentionCost,
    /// Sliding local attention over `window` neighbours; counted only.
    pub local: AttentionCost,
}

#[derive(Default)]
struct Acc {
    heads: u64,
    d: u64,
    cost: AttentionCost,
}

impl Acc {
    fn layer(&mut self, entries: u64, rows: u64) {
        self.cost.score_entries += self.heads * entries;
        self.cost.activations += 2 * self.heads * entries + rows * self.d;
    }
}

/// Counts for `n_context` context and `n_masked` masked tokens. The
/// bottleneck and full counts depend only on those sizes; the axial,
/// window and local counts assume they cover the `grid` sub-volume.
pub fn count_attention_cost(
    config: &ModelConfig,
    n_context: usize,
    n_masked: usize,
    grid: (usize, usize, usize),
) -> CostReport {
    let acc = || Acc {
        heads: config.num_heads as u64,
        d: config.d_model as u64,
        cost: AttentionCost::default(),
    };
    let (nl, nc, nm) = (config.n_latent as u64, n_context as u64, n_masked as u64);
    let n = nc + nm;
    let layers = config.dense_layers();
    let (t, h, w) = (grid.0 as u64, grid.1 as u64, grid.2 as u64);

    let mut mebt = acc();
    for _ in 0..config.encoder_blocks() {
        if nc > 0 {
            mebt.layer(nl * nc, nl);
        }
        mebt.layer(nl * nl, nl);
    }
    for _ in 0..config.decoder_blocks() {
        mebt.layer(nl * (nl + nm), nl);
        mebt.layer(nm * nl, nm);
    }

    let mut full = acc();
    for _ in 0..layers {
        full.layer(n * n, n);
    }

    let grid_n = t * h * w;
    let mut axial = acc();
    for l in 0..layers {
        let axis = [t, h, w][l % 3];
        axial.layer(grid_n * axis, grid_n);
    }

    let frame = h * w;
    let win = config.window as u64;
    let mut window = acc();
    for l in 0..layers {
        if l % 2 == 0 {
            window.layer(t * frame * frame, grid_n);
        } else {
            let mut entries = 0;
            let mut start = 0;
            while start < frame {
                let size = win.min(frame - start);
                entries += (size * t) * (size * t);
                start += win;
            }
            window.layer(entries, grid_n);
        }
    }

    let mut local = acc();
    for _ in 0..layers {
        local.layer(win.min(grid_n) * grid_n, grid_n);
    }

    CostReport {
        mebt: mebt.cost,
        full: full.cost,
        axial: axial.cost,
        window: window.cost,
        local: local.cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backend, MaskedBatch, MebtModel};
    use crate::nn::Fwd;
    use proptest::prelude::*;

    fn cfg(
        backend: Backend,
        num_layers: usize,
        heads: usize,
        n_latent: usize,
        grid: (usize, usize, usize),
    ) -> ModelConfig {
        ModelConfig {
            num_layers,
            num_heads: heads,
            d_model: 4 * heads,
            n_latent,
            grid,
            vocab: 5,
            dropout: 0.0,
            backend,
            window: 4,
        }
    }

    fn measured(config: &ModelConfig, n_context: usize, n_masked: usize) -> u64 {
        let model = MebtModel::new(config.clone(), 0).unwrap();
        let total = config.n_max();
        let context = (0..n_context).map(|p| (p, 0u16)).collect();
        let masked = (n_context..n_context + n_masked).collect();
        let batch = MaskedBatch::new(context, masked, vec![], (0, config.grid.0), config.frame_tokens()).unwrap();
        assert!(n_context + n_masked <= total);
        let mut fx = Fwd::eval(&model.store);
        model.forward(&mut fx, &batch).unwrap();
        fx.score_entries()
    }

    #[test]
    fn single_encoder_block_example() {
        // 2 blocks -> one encoder pair and one decoder pair
        let c = cfg(Backend::Mebt, 2, 1, 4, (16, 1, 1));
        let r = count_attention_cost(&c, 12, 4, (16, 1, 1));
        let decoder = 4 * (4 + 4) + 4 * 4;
        assert_eq!(r.mebt.score_entries, 64 + decoder);
        assert_eq!(4 * 12 + 4 * 4, 64);
    }

    #[test]
    fn decoder_pair_versus_full_layer() {
        let c = cfg(Backend::Mebt, 2, 1, 4, (16, 1, 1));
        let with = count_attention_cost(&c, 0, 12, (16, 1, 1));
        // empty context: encoder is the latent self-attention only
        assert_eq!(with.mebt.score_entries - 16, 4 * 16 + 12 * 4);
        assert_eq!(4 * 16 + 12 * 4, 112);
        let sixteen = count_attention_cost(&c, 4, 12, (16, 1, 1));
        assert_eq!(sixteen.full.score_entries, 4 * 256);
    }

    #[test]
    fn axial_and_window_examples() {
        let c = cfg(Backend::Axial, 1, 1, 1, (4, 4, 4));
        let r = count_attention_cost(&c, 60, 4, (4, 4, 4));
        assert_eq!(r.axial.score_entries, 2 * 64 * 4);
        let c = cfg(Backend::Window, 1, 1, 1, (8, 2, 2));
        let r = count_attention_cost(&c, 28, 4, (8, 2, 2));
        // frame-wise layer 8 * 4^2, then one 4-position window over 8 frames
        assert_eq!(r.window.score_entries, 8 * 16 + (4 * 8) * (4 * 8));
    }

    #[test]
    fn doubling_t_doubles_token_dependent_mebt_cost_and_quadruples_full() {
        let c = cfg(Backend::Mebt, 4, 2, 8, (8, 4, 4));
        let base = count_attention_cost(&c, 0, 0, (8, 4, 4)).mebt.score_entries;
        let a = count_attention_cost(&c, 96, 32, (8, 4, 4));
        let b = count_attention_cost(&c, 192, 64, (16, 4, 4));
        assert_eq!(b.mebt.score_entries - base, 2 * (a.mebt.score_entries - base));
        assert_eq!(b.full.score_entries, 4 * a.full.score_entries);
    }

    #[test]
    fn counter_matches_instrumented_forward() {
        for backend in [Backend::Mebt, Backend::Full, Backend::Axial, Backend::Window] {
            let c = cfg(backend, 2, 2, 3, (4, 2, 4));
            for (nc, nm) in [(0, 32), (20, 12), (31, 1)] {
                let r = count_attention_cost(&c, nc, nm, c.grid);
                let expect = match backend {
                    Backend::Mebt => r.mebt,
                    Backend::Full => r.full,
                    Backend::Axial => r.axial,
                    Backend::Window => r.window,
                };
                assert_eq!(measured(&c, nc, nm), expect.score_entries, "{backend} {nc} {nm}");
            }
        }
    }

    proptest! {
        #[test]
        fn mebt_cost_is_affine_in_context_and_masks(nl in 1usize..16, nc in 0usize..500, nm in 1usize..500, k in 1usize..50, layers in 1usize..4) {
            let c = cfg(Backend::Mebt, 2 * layers, 2, nl, (1, 1, 1));
            let f = |a: usize, b: usize| count_attention_cost(&c, a, b, (1, 1, 1)).mebt.score_entries as i128;
            // second differences vanish (context counts start at one to skip the empty-context branch)
            let c0 = nc + 1;
            prop_assert_eq!(f(c0 + 2 * k, nm) - f(c0 + k, nm), f(c0 + k, nm) - f(c0, nm));
            prop_assert_eq!(f(nc, nm + 2 * k) - f(nc, nm + k), f(nc, nm + k) - f(nc, nm));
        }

        #[test]
        fn full_cost_is_quadratic(n in 1usize..2000) {
            let c = cfg(Backend::Full, 3, 2, 1, (1, 1, 1));
            let r = count_attention_cost(&c, n - n / 2, n / 2, (1, 1, 1));
            prop_assert_eq!(r.full.score_entries, (6 * 2 * n * n) as u64);
        }
    }
}
