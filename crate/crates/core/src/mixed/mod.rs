//! Mixed-model fit of the household series: fixed effects, spline BLUPs,
//! random-effect variances and size-grouped residual variances.

pub mod decompose;
mod optimize;
pub mod predict;
pub mod reml;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignMeta, DesignSet, FixedColumn};
use crate::error::{KdemError, Result};

pub use decompose::{decompose_fit, decompose_variance, VarianceDecomposition};
pub use optimize::{Convergence, FitOptions};
pub use predict::{household_residuals, predict_individual, IntakeMatrix, IntakeRow};
pub use reml::{evaluate, Evaluation, Method, SuffStats};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub meta: DesignMeta,
    pub n_rows: usize,
    /// In the order of `meta.fixed_names`.
    pub fixed: Vec<f64>,
    pub fixed_cov: Vec<Vec<f64>>,
    /// In the order of `meta.random_names`.
    pub u_blup: Vec<f64>,
    /// One per random block.
    pub sigma_u2: Vec<f64>,
    pub sigma_u2_se: Vec<Option<f64>>,
    /// One per size group.
    pub sigma_n2: Vec<f64>,
    pub sigma_n2_se: Vec<Option<f64>>,
    /// Covariance of `[sigma_u2, sigma_n2]` from the observed information.
    pub variance_cov: Vec<Vec<f64>>,
    pub loglik: f64,
    pub convergence: Convergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectKind {
    Age,
    Socio,
    Week,
}

impl FitResult {
    pub fn residual_df(&self) -> usize {
        self.n_rows - self.fixed.len()
    }

    pub fn fixed_cov_matrix(&self) -> DMatrix<f64> {
        let p = self.fixed.len();
        DMatrix::from_fn(p, p, |i, j| self.fixed_cov[i][j])
    }

    pub fn fixed_se(&self) -> Vec<f64> {
        (0..self.fixed.len()).map(|i| self.fixed_cov[i][i].max(0.0).sqrt()).collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.meta.fixed_index(name).map(|i| self.fixed[i])
    }

    /// `(name, estimate, se)` of one kind of fixed effect.
    pub fn effects(&self, kind: EffectKind) -> Vec<(String, f64, f64)> {
        let se = self.fixed_se();
        self.meta
            .fixed_columns
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                matches!(
                    (kind, c),
                    (EffectKind::Age, FixedColumn::Beta(_))
                        | (EffectKind::Socio, FixedColumn::Socio { .. })
                        | (EffectKind::Week, FixedColumn::Week(_))
                )
            })
            .map(|(i, _)| (self.meta.fixed_names[i].clone(), self.fixed[i], se[i]))
            .collect()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.effects(EffectKind::Age).into_iter().map(|e| e.1).collect()
    }

    pub fn gamma(&self) -> Vec<(String, f64)> {
        self.effects(EffectKind::Socio).into_iter().map(|e| (e.0, e.1)).collect()
    }

    pub fn alpha(&self) -> Vec<(String, f64)> {
        self.effects(EffectKind::Week).into_iter().map(|e| (e.0, e.1)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| KdemError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| KdemError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn fit_reml(design: &DesignSet) -> Result<FitResult> {
    fit(design, &FitOptions::default())
}

pub fn fit_ml(design: &DesignSet) -> Result<FitResult> {
    fit(design, &FitOptions::ml())
}

pub fn fit(design: &DesignSet, opts: &FitOptions) -> Result<FitResult> {
    fit_stats(&SuffStats::from_design(design), &design.meta, opts)
}

/// Fit from precomputed cross-products, e.g. when only the response
/// changes between replicates.
pub fn fit_stats(stats: &SuffStats, meta: &DesignMeta, opts: &FitOptions) -> Result<FitResult> {
    let p = stats.p;
    if stats.n() <= p {
        return Err(KdemError::invalid(format!(
            "{} rows cannot identify {p} fixed effects",
            stats.n()
        )));
    }
    let opt = optimize::maximize(stats, opts)?;
    let full = match opts.method {
        Method::Reml => opt.eval.clone(),
        Method::Ml => evaluate(stats, Method::Reml, &opt.sigma_u2, &opt.sigma_g2, true)?,
    };
    let cov = full.fixed_cov(p);
    let nb = opt.sigma_u2.len();
    let se = |i: usize| {
        let v = opt.variance_cov[(i, i)];
        (v > 0.0).then(|| v.sqrt())
    };
    Ok(FitResult {
        method: opts.method,
        meta: meta.clone(),
        n_rows: stats.n(),
        fixed: opt.eval.solution.rows(0, p).iter().copied().collect(),
        fixed_cov: (0..p).map(|i| cov.row(i).iter().copied().collect()).collect(),
        u_blup: opt.eval.solution.rows(p, stats.q).iter().copied().collect(),
        sigma_u2_se: (0..nb).map(se).collect(),
        sigma_n2_se: (0..opt.sigma_g2.len()).map(|g| se(nb + g)).collect(),
        variance_cov: (0..opt.variance_cov.nrows())
            .map(|i| opt.variance_cov.row(i).iter().copied().collect())
            .collect(),
        sigma_u2: opt.sigma_u2,
        sigma_n2: opt.sigma_g2,
        loglik: opt.eval.loglik,
        convergence: opt.convergence,
    })
}

/// `C theta_hat + Z u_hat` for every design row.
pub fn fitted_rows(fit: &FitResult, design: &DesignSet) -> DVector<f64> {
    &design.fixed * DVector::from_column_slice(&fit.fixed) + &design.random * DVector::from_column_slice(&fit.u_blup)
}
