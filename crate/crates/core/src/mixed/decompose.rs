//! Split of the size-group residual variances into an individual variance
//! and an intra-household correlation: `sigma_n^2 = sigma^2 (1 - rho) +
//! sigma^2 rho n`.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::FitResult;
use crate::error::{KdemError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub sigma_eps2: f64,
    pub rho: f64,
    pub se_sigma_eps2: Option<f64>,
    pub se_rho: Option<f64>,
    pub intercept: f64,
    pub slope: f64,
}

impl VarianceDecomposition {
    /// Implied variance of a household error of size `n`, before rescaling.
    pub fn household_variance(&self, n: f64) -> f64 {
        self.sigma_eps2 * (1.0 + (n - 1.0) * self.rho)
    }

    /// Error unless the implied household variance is positive at every
    /// size in `sizes`.
    pub fn check_sizes(&self, sizes: &[f64]) -> Result<()> {
        for &n in sizes {
            if self.household_variance(n) <= 0.0 {
                return Err(KdemError::numerical(format!(
                    "implied household variance sigma^2 (1 + (n - 1) rho) is not positive at n = {n} (rho = {})",
                    self.rho
                )));
            }
        }
        Ok(())
    }
}

/// Count-weighted least squares of `sigma_n2` on household size.
///
/// This is only the inversion of the linear map; see
/// [`VarianceDecomposition::check_sizes`] for consistency with observed sizes.
///
/// `sizes` are the (mean) household sizes of the groups. Standard errors
/// use `cov`, the covariance of `sigma_n2`, propagated through the
/// regression when given; otherwise the weighted residual variance, which
/// needs at least three groups.
pub fn decompose_variance(
    sigma_n2: &[f64],
    sizes: &[f64],
    counts: &[usize],
    cov: Option<&DMatrix<f64>>,
) -> Result<VarianceDecomposition> {
    let g = sigma_n2.len();
    if sizes.len() != g || counts.len() != g {
        return Err(KdemError::invalid("variance, size and count vectors differ in length"));
    }
    if g < 2 {
        return Err(KdemError::invalid("variance decomposition needs at least two size groups"));
    }
    let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mut xtwx = Matrix2::zeros();
    let mut xtwy = Vector2::zeros();
    for i in 0..g {
        let x = Vector2::new(1.0, sizes[i]);
        xtwx += x * x.transpose() * w[i];
        xtwy += x * (w[i] * sigma_n2[i]);
    }
    let inv = xtwx
        .try_inverse()
        .filter(|_| xtwx.determinant().abs() > 1e-12 * xtwx.norm_squared())
        .ok_or_else(|| KdemError::invalid("variance decomposition needs two distinct household sizes"))?;
    let b = inv * xtwy;
    let (b0, b1) = (b[0], b[1]);
    let sigma = b0 + b1;
    if !(sigma > 0.0) {
        return Err(KdemError::numerical(format!(
            "no valid decomposition: implied individual variance {sigma} is not positive"
        )));
    }
    let rho = b1 / sigma;

    let cov_b = match cov {
        Some(c) => {
            let mut a = DMatrix::zeros(2, g);
            for i in 0..g {
                let col = inv * Vector2::new(w[i], w[i] * sizes[i]);
                a[(0, i)] = col[0];
                a[(1, i)] = col[1];
            }
            let cb = &a * c * a.transpose();
            Some(Matrix2::new(cb[(0, 0)], cb[(0, 1)], cb[(1, 0)], cb[(1, 1)]))
        }
        None if g > 2 => {
            let rss: f64 = (0..g)
                .map(|i| w[i] * (sigma_n2[i] - b0 - b1 * sizes[i]).powi(2))
                .sum();
            Some(inv * (rss / (g - 2) as f64))
        }
        None => None,
    };
    let (se_sigma, se_rho) = match cov_b {
        Some(cb) => {
            let js = Vector2::new(1.0, 1.0);
            let jr = Vector2::new(-b1, b0) / (sigma * sigma);
            (
                Some((js.transpose() * cb * js)[0].max(0.0).sqrt()),
                Some((jr.transpose() * cb * jr)[0].max(0.0).sqrt()),
            )
        }
        None => (None, None),
    };
    Ok(VarianceDecomposition {
        sigma_eps2: sigma,
        rho,
        se_sigma_eps2: se_sigma,
        se_rho,
        intercept: b0,
        slope: b1,
    })
}

/// Decomposition of a fit's group variances, with standard errors from the
/// fit's variance-parameter covariance.
pub fn decompose_fit(fit: &FitResult) -> Result<VarianceDecomposition> {
    let groups = &fit.meta.groups;
    let sizes: Vec<f64> = groups.iter().map(|g| g.mean_size).collect();
    let counts: Vec<usize> = groups.iter().map(|g| g.rows).collect();
    let nb = fit.sigma_u2.len();
    let gsz = fit.sigma_n2.len();
    let cov = DMatrix::from_fn(gsz, gsz, |i, j| fit.variance_cov[nb + i][nb + j]);
    let has_cov = (0..gsz).all(|i| cov[(i, i)] > 0.0);
    let out = decompose_variance(&fit.sigma_n2, &sizes, &counts, has_cov.then_some(&cov))?;
    let observed: Vec<f64> = groups.iter().flat_map(|g| g.sizes.iter().map(|&n| n as f64)).collect();
    out.check_sizes(&observed)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_variances_give_zero_correlation() {
        let d = decompose_variance(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0], &[10, 20, 30], None).unwrap();
        assert!(d.rho.abs() < 1e-12);
        assert!((d.sigma_eps2 - 3.0).abs() < 1e-12);
        assert!(d.se_rho.unwrap() < 1e-12);
    }

    #[test]
    fn two_point_hand_solution() {
        let d = decompose_variance(&[4.0, 6.0], &[1.0, 2.0], &[5, 7], None).unwrap();
        assert!((d.intercept - 2.0).abs() < 1e-12);
        assert!((d.slope - 2.0).abs() < 1e-12);
        assert!((d.sigma_eps2 - 4.0).abs() < 1e-12);
        assert!((d.rho - 0.5).abs() < 1e-12);
        assert_eq!(d.se_rho, None);
    }

    #[test]
    fn nonpositive_sum_rejected() {
        assert!(decompose_variance(&[-1.0, -2.0], &[1.0, 2.0], &[5, 5], None).is_err());
    }

    #[test]
    fn inconsistent_correlation_rejected() {
        // sigma^2 = 1, rho = -0.6 makes n = 3 negative
        let s: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|n| 1.0 + (n - 1.0) * -0.6).collect();
        let d = decompose_variance(&s, &[1.0, 2.0, 3.0], &[5, 5, 5], None).unwrap();
        assert!((d.rho + 0.6).abs() < 1e-12);
        assert!(d.check_sizes(&[1.0, 2.0]).is_ok());
        assert!(d.check_sizes(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn covariance_propagation() {
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.04, 0.09]));
        let d = decompose_variance(&[4.0, 6.0], &[1.0, 2.0], &[1, 1], Some(&cov)).unwrap();
        // b0 = 2 s1 - s2, b1 = s2 - s1, sigma = s1: se(sigma) = 0.2
        assert!((d.se_sigma_eps2.unwrap() - 0.2).abs() < 1e-12);
        // rho = s2 / s1 - 1: grad (-s2 / s1^2, 1 / s1)
        let want = ((6.0f64 / 16.0).powi(2) * 0.04 + (1.0f64 / 4.0).powi(2) * 0.09).sqrt();
        assert!((d.se_rho.unwrap() - want).abs() < 1e-12);
    }
}
