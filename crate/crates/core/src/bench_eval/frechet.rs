//! Frechet distance between Gaussians fitted to two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MebtError, Result};

fn moments(features: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

/// Square root of a symmetric PSD matrix; eigenvalues are clamped at zero,
/// but clearly negative ones are reported.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| !v.is_finite() || v < -1e-6 * scale) {
        return Err(MebtError::Numeric {
            layer: 0,
            msg: format!("{what} is not positive semi-definite"),
        });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the cross term
/// computed as `tr((S1^(1/2) S2 S1^(1/2))^(1/2))`.
pub fn frechet_feature_distance(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(MebtError::config("need at least two samples per side"));
    }
    let dim = real[0].len();
    if dim == 0 || real.iter().chain(fake).any(|f| f.len() != dim) {
        return Err(MebtError::config("feature dimensions differ"));
    }
    let (m1, s1) = moments(real, dim);
    let (m2, s2) = moments(fake, dim);
    let r1 = sqrt_psd(&s1, "first covariance")?;
    let inner = &r1 * &s2 * &r1;
    let cross = sqrt_psd(&inner, "covariance product")?.trace();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// `mu +- sigma / sqrt 2` has sample mean `mu` and unbiased variance
    /// `sigma^2`.
    fn one_d(mu: f64, sigma: f64) -> Vec<Vec<f64>> {
        let a = sigma / 2f64.sqrt();
        vec![vec![mu - a], vec![mu + a]]
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let d = frechet_feature_distance(&one_d(0.0, 1.0), &one_d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let d = frechet_feature_distance(&one_d(0.0, 1.0), &one_d(0.0, 2.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_are_at_distance_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        assert!(frechet_feature_distance(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn diagonal_gaussians_match_closed_form() {
        // axis-aligned sets with exact sample moments
        let set = |mu: [f64; 2], s: [f64; 2]| {
            let (a, b) = (s[0] / 2f64.sqrt(), s[1] / 2f64.sqrt());
            vec![
                vec![mu[0] - a, mu[1] - b],
                vec![mu[0] + a, mu[1] - b],
                vec![mu[0] - a, mu[1] + b],
                vec![mu[0] + a, mu[1] + b],
            ]
        };
        // four corners: unbiased variance of each axis is 4 a^2 / 3
        let scale = (4.0f64 / 3.0).sqrt() / 2f64.sqrt();
        let d = frechet_feature_distance(&set([0.0, 1.0], [1.0, 2.0]), &set([2.0, 1.0], [3.0, 1.0])).unwrap();
        let var = |s: f64| s * scale;
        let expect = 4.0 + (var(1.0) - var(3.0)).powi(2) + (var(2.0) - var(1.0)).powi(2);
        assert!((d - expect).abs() < 1e-10, "{d} vs {expect}");
    }

    #[test]
    fn bad_inputs() {
        assert!(frechet_feature_distance(&[vec![1.0]], &one_d(0.0, 1.0)).is_err());
        assert!(frechet_feature_distance(&one_d(0.0, 1.0), &[vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn symmetric_and_non_negative(seed in any::<u64>(), shift in -2.0f64..2.0, stretch in 0.2f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |s: f64, m: f64| -> Vec<Vec<f64>> {
                (0..30).map(|_| (0..3).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); m + s * z }).collect()).collect()
            };
            let a = draw(1.0, 0.0);
            let b = draw(stretch, shift);
            let ab = frechet_feature_distance(&a, &b).unwrap();
            let ba = frechet_feature_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        }
    }
}
