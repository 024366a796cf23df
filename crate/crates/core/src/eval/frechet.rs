//! Fréchet distance between two Gaussian fits of feature sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{input_err, FadeError, Result};

/// Diagonal loading added to each covariance before the matrix square root.
pub const COV_REGULARIZATION: f64 = 1e-6;

/// Mean and (unbiased) covariance of a set of feature rows.
pub fn gaussian_fit(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return input_err("a Gaussian fit needs at least two feature vectors");
    }
    let d = feats[0].len();
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return input_err("feature vectors must share one positive dimension");
    }
    let mut mu = DVector::zeros(d);
    for f in feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let c = DVector::from_iterator(d, f.iter().zip(mu.iter()).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

/// Symmetric positive semi-definite square root, negative eigenvalues
/// from rounding clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Distance between two fitted Gaussians.
///
/// `Tr((Σa Σb)^½)` is evaluated as `Tr((Σa^½ Σb Σa^½)^½)`, which has the
/// same trace and is symmetric, so an eigendecomposition applies.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return input_err("Gaussian statistics have mismatched dimensions");
    }
    let eye = DMatrix::<f64>::identity(d, d) * COV_REGULARIZATION;
    let ca = cov_a + &eye;
    let cb = cov_b + &eye;
    let diff = mu_a - mu_b;
    let tr_cross = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        let rx = sqrt_psd(x);
        sqrt_psd(&(&rx * y * &rx)).trace()
    };
    // average both orderings so swapping the arguments is exact to rounding
    let cross = 0.5 * (tr_cross(&ca, &cb) + tr_cross(&cb, &ca));
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(FadeError::Numerical(format!("Fréchet distance is not finite (covariances regularized by {COV_REGULARIZATION:e}·I)")));
    }
    Ok(value.max(0.0))
}

/// Fréchet distance between two feature sets.
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(feats_a)?;
    let (mb, cb) = gaussian_fit(feats_b)?;
    frechet_from_stats(&ma, &ca, &mb, &cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    }

    #[test]
    fn identical_sets_are_at_zero() {
        let a = gauss(200, 4, 0.0, 1);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn symmetric() {
        let a = gauss(300, 3, 0.0, 2);
        let b = gauss(250, 3, 0.7, 3);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn two_dimensional_closed_form() {
        // diagonal covariances commute, so the cross term is sum sqrt(a_i b_i)
        let mu_a = DVector::from_vec(vec![0.0, 1.0]);
        let mu_b = DVector::from_vec(vec![2.0, -1.0]);
        let ca = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let cb = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 0.25]));
        let got = frechet_from_stats(&mu_a, &ca, &mu_b, &cb).unwrap();
        let e = COV_REGULARIZATION;
        let oracle = 4.0 + 4.0 + (1.0 + e) + (4.0 + e) + (9.0 + e) + (0.25 + e)
            - 2.0 * (((1.0 + e) * (9.0 + e)).sqrt() + ((4.0 + e) * (0.25 + e)).sqrt());
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn rotated_covariance_against_closed_form() {
        // rotate both diagonal covariances by the same angle: the distance is
        // rotation invariant, so it equals the unrotated closed form
        let (s, c) = 0.6f64.sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let da = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let db = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let ca = &r * &da * r.transpose();
        let cb = &r * &db * r.transpose();
        let z = DVector::zeros(2);
        let got = frechet_from_stats(&z, &ca, &z, &cb).unwrap();
        let e = COV_REGULARIZATION;
        let oracle = ((2.0 + e).sqrt() - (1.0 + e).sqrt()).powi(2) + ((0.5 + e).sqrt() - (3.0 + e).sqrt()).powi(2);
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn unit_shift_in_one_dimension() {
        let a = gauss(100_000, 1, 0.0, 4);
        let b = gauss(100_000, 1, 1.0, 5);
        let v = frechet_distance(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(frechet_distance(&[vec![1.0], vec![1.0, 2.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn non_finite_is_a_numerical_error() {
        let a = vec![vec![f64::NAN], vec![1.0]];
        match frechet_distance(&a, &a) {
            Err(FadeError::Numerical(m)) => assert!(m.contains("regularized")),
            other => panic!("{other:?}"),
        }
    }
}
