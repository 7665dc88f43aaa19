//! Interval curriculum, masking-ratio sampling and the decoding quota.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MebtError, Result};

/// `ceil` that ignores floating-point residue just above an integer, so
/// `0.3 * 10.0 = 3.0000000000000004` counts as 3.
pub fn ceil_tol(x: f64) -> usize {
    let c = (x - 1e-9).ceil();
    if c < 0.0 {
        0
    } else {
        c as usize
    }
}

/// Gaussian curriculum over training-clip lengths (in latent frames).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSchedule {
    /// Iterations per unit growth of the mean length.
    pub alpha: f64,
    /// Standard deviation of the length distribution.
    pub beta: f64,
    /// Longest valid interval `t`.
    pub t_max: usize,
}

impl IntervalSchedule {
    pub fn new(alpha: f64, beta: f64, t_max: usize) -> Result<Self> {
        if alpha.is_nan() || alpha <= 0.0 || beta.is_nan() || beta <= 0.0 || t_max == 0 {
            return Err(MebtError::config(
                "interval schedule needs alpha > 0, beta > 0, t_max >= 1",
            ));
        }
        Ok(Self { alpha, beta, t_max })
    }

    pub fn mean(&self, n: u64) -> f64 {
        1.0 + n as f64 / self.alpha
    }
}

/// Unnormalized density `exp(-(v - 1 - n/alpha)^2 / (2 beta^2))`.
pub fn interval_pdf(v: usize, n: u64, sched: &IntervalSchedule) -> f64 {
    let z = v as f64 - sched.mean(n);
    (-(z * z) / (2.0 * sched.beta * sched.beta)).exp()
}

/// `min(max(1, ceil(v_hat)), t_max)`.
pub fn clamp_interval(v_hat: f64, t_max: usize) -> usize {
    if v_hat.is_nan() {
        return 1;
    }
    let c = v_hat.ceil();
    if c < 1.0 {
        1
    } else if c >= t_max as f64 {
        t_max
    } else {
        c as usize
    }
}

pub fn sample_interval<R: Rng + ?Sized>(n: u64, sched: &IntervalSchedule, rng: &mut R) -> usize {
    let z: f64 = StandardNormal.sample(rng);
    clamp_interval(sched.mean(n) + sched.beta * z, sched.t_max)
}

/// Shape of the decreasing schedule `gamma` with `gamma(0) = 1`,
/// `gamma(1) = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaKind {
    #[default]
    Cosine,
    Linear,
}

impl GammaKind {
    pub fn eval(self, u: f64) -> f64 {
        if u <= 0.0 {
            return 1.0;
        }
        if u >= 1.0 {
            return 0.0;
        }
        match self {
            GammaKind::Cosine => (std::f64::consts::FRAC_PI_2 * u).cos(),
            GammaKind::Linear => 1.0 - u,
        }
    }
}

impl std::str::FromStr for GammaKind {
    type Err = MebtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(MebtError::config(format!("unknown gamma kind {other}"))),
        }
    }
}

/// Masking ratio for a uniform draw `u`, floored at `1 / n_max` so at least
/// one token is masked.
pub fn mask_ratio_at(u: f64, gamma: GammaKind, n_max: usize) -> f64 {
    gamma.eval(u).clamp(1.0 / n_max.max(1) as f64, 1.0)
}

pub fn sample_mask_ratio<R: Rng + ?Sized>(gamma: GammaKind, n_max: usize, rng: &mut R) -> f64 {
    mask_ratio_at(rng.random::<f64>(), gamma, n_max)
}

/// `ceil(r n)` unique indices drawn uniformly from `0..n`, sorted.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<Vec<usize>> {
    if r.is_nan() || r <= 0.0 || r > 1.0 {
        return Err(MebtError::config(format!("mask ratio {r} outside (0, 1]")));
    }
    let count = ceil_tol(r * n as f64).min(n);
    let mut m = index::sample(rng, n, count).into_vec();
    m.sort_unstable();
    Ok(m)
}

/// Context size after decoding step `s` of `total`:
/// `N - ceil(gamma((s + 1) / S) * N)`, which reaches `N` at the last step.
pub fn tokens_decoded_after(s: usize, total: usize, n: usize, gamma: GammaKind) -> Result<usize> {
    if s >= total {
        return Err(MebtError::logic(format!("step {s} outside 0..{total}")));
    }
    let remaining = ceil_tol(gamma.eval((s + 1) as f64 / total as f64) * n as f64).min(n);
    Ok(n - remaining)
}

/// Clip-length strategy during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curriculum {
    /// Always the whole video.
    #[default]
    None,
    /// Length uniform on `1..=t`.
    Uniform,
    /// Gaussian curriculum with growing mean.
    Gaussian,
}

impl std::str::FromStr for Curriculum {
    type Err = MebtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "uniform" => Ok(Self::Uniform),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(MebtError::config(format!("unknown curriculum {other}"))),
        }
    }
}

impl Curriculum {
    pub fn sample_length<R: Rng + ?Sized>(self, n: u64, sched: &IntervalSchedule, rng: &mut R) -> usize {
        match self {
            Curriculum::None => sched.t_max,
            Curriculum::Uniform => rng.random_range(1..=sched.t_max),
            Curriculum::Gaussian => sample_interval(n, sched, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pdf_values() {
        let s = IntervalSchedule::new(30_000.0, 2.0, 32).unwrap();
        assert_eq!(interval_pdf(1, 0, &s), 1.0);
        assert_eq!(interval_pdf(3, 60_000, &s), 1.0);
        assert!((interval_pdf(1, 60_000, &s) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((interval_pdf(1, 60_000, &s) - 0.6065).abs() < 1e-4);
        for k in 0..3 {
            assert_eq!(interval_pdf(3 - k, 60_000, &s), interval_pdf(3 + k, 60_000, &s));
        }
    }

    #[test]
    fn clamp_rule() {
        assert_eq!(clamp_interval(9.3, 8), 8);
        assert_eq!(clamp_interval(-0.4, 8), 1);
        assert_eq!(clamp_interval(2.1, 8), 3);
        assert_eq!(clamp_interval(3.0, 8), 3);
    }

    #[test]
    fn late_iterations_saturate() {
        let s = IntervalSchedule::new(10.0, 2.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_interval(1_000_000, &s, &mut rng) == 8));
    }

    #[test]
    fn mask_ratio_edges() {
        assert_eq!(mask_ratio_at(0.0, GammaKind::Cosine, 64), 1.0);
        assert_eq!(mask_ratio_at(1.0, GammaKind::Cosine, 64), 1.0 / 64.0);
        assert_eq!(mask_ratio_at(0.9999999, GammaKind::Cosine, 64), 1.0 / 64.0);
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_mask(1024, 0.5, &mut rng).unwrap().len(), 512);
        assert_eq!(sample_mask(64, 1.0, &mut rng).unwrap(), (0..64).collect::<Vec<_>>());
        assert_eq!(sample_mask(100, 0.001, &mut rng).unwrap().len(), 1);
        assert_eq!(sample_mask(10, 0.3, &mut rng).unwrap().len(), 3);
        assert!(sample_mask(10, 0.0, &mut rng).is_err());
        assert!(sample_mask(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn decoding_quota_examples() {
        let c = GammaKind::Cosine;
        assert_eq!(tokens_decoded_after(7, 8, 64, c).unwrap(), 64);
        assert_eq!(tokens_decoded_after(0, 8, 64, c).unwrap(), 1);
        assert_eq!(tokens_decoded_after(3, 8, 64, c).unwrap(), 18);
        assert_eq!(tokens_decoded_after(0, 1, 64, c).unwrap(), 64);
        assert!(tokens_decoded_after(8, 8, 64, c).is_err());
    }

    #[test]
    fn cosine_ratio_mean_matches_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_mask_ratio(GammaKind::Cosine, 4096, &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0 / std::f64::consts::PI).abs() < 0.01, "{mean}");
    }

    #[test]
    fn mask_inclusion_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, r, draws) = (40usize, 0.3, 20_000usize);
        let mut hits = vec![0usize; n];
        for _ in 0..draws {
            for i in sample_mask(n, r, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        let p = 12.0 / 40.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn curricula() {
        let s = IntervalSchedule::new(100.0, 2.0, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..100).all(|_| Curriculum::None.sample_length(0, &s, &mut rng) == 16));
        let mut seen = [false; 17];
        for _ in 0..2000 {
            seen[Curriculum::Uniform.sample_length(0, &s, &mut rng)] = true;
        }
        assert!(seen[1..].iter().all(|&b| b) && !seen[0]);
        assert_eq!("gaussian".parse::<Curriculum>().unwrap(), Curriculum::Gaussian);
        assert!("linear".parse::<Curriculum>().is_err());
    }

    proptest! {
        #[test]
        fn quota_is_monotone_and_complete(total in 1usize..200, n in 1usize..5000, linear in any::<bool>()) {
            let g = if linear { GammaKind::Linear } else { GammaKind::Cosine };
            let mut prev = 0;
            for s in 0..total {
                let q = tokens_decoded_after(s, total, n, g).unwrap();
                prop_assert!(q >= prev);
                prop_assert!(q <= n);
                prev = q;
            }
            prop_assert_eq!(prev, n);
        }

        #[test]
        fn sampled_interval_in_range(n in 0u64..1_000_000, t in 1usize..64, seed in any::<u64>()) {
            let s = IntervalSchedule::new(3000.0, 2.0, t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = sample_interval(n, &s, &mut rng);
            prop_assert!((1..=t).contains(&v));
        }

        #[test]
        fn pdf_mode_is_rounded_mean(n in 0u64..10_000, alpha in 100.0f64..50_000.0) {
            let s = IntervalSchedule::new(alpha, 2.0, 10_000).unwrap();
            let mut best = 1;
            for v in 1..200 {
                if interval_pdf(v, n, &s) > interval_pdf(best, n, &s) {
                    best = v;
                }
            }
            let mean = s.mean(n);
            // ties (mean exactly at a half-integer) go to the smaller value
            let expected = if (mean - mean.floor() - 0.5).abs() < 1e-12 { mean.floor() } else { mean.round() };
            prop_assert_eq!(best, expected as usize);
        }

        #[test]
        fn mask_indices_sorted_unique(n in 1usize..500, r in 0.0001f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(n, r, &mut rng).unwrap();
            prop_assert_eq!(m.len(), ceil_tol(r * n as f64).min(n));
            prop_assert!(m.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.iter().all(|&i| i < n));
        }
    }
}
