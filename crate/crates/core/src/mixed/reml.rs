//! Restricted and full likelihood of the grouped-variance mixed model,
//! evaluated from per-group cross-products of `[C Z y]`.
//!
//! With `D = diag(1_p, sigma_k ...)` and `M = sum_g S_g / sigma_g^2`, the
//! scaled mixed-model matrix `A = D M_WW D + diag(0_p, I_q)` stays well
//! defined when a random-effect variance is exactly zero.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{KdemError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Reml,
    Ml,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Reml => "REML",
            Method::Ml => "ML",
        })
    }
}

/// Cross-products of `[C Z y]` per residual-variance group.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub p: usize,
    pub q: usize,
    /// `(start, len)` of each variance block within `Z`.
    pub blocks: Vec<(usize, usize)>,
    pub groups: Vec<DMatrix<f64>>,
    pub counts: Vec<usize>,
    /// OLS coefficients already removed from the response column; added
    /// back to the fixed-effect solution.
    pub offset: DVector<f64>,
    /// `y'y` before the OLS fit was removed.
    pub response_ss: f64,
}

impl SuffStats {
    pub fn from_design(ds: &DesignSet) -> Self {
        let p = ds.fixed.ncols();
        let q = ds.random.ncols();
        let d = p + q;
        let g = ds.meta.groups.len();
        let mut groups = vec![DMatrix::zeros(d + 1, d + 1); g];
        let mut counts = vec![0; g];
        let mut idx = Vec::with_capacity(d + 1);
        let mut val = Vec::with_capacity(d + 1);
        for r in 0..ds.n_rows() {
            idx.clear();
            val.clear();
            for j in 0..p {
                let v = ds.fixed[(r, j)];
                if v != 0.0 {
                    idx.push(j);
                    val.push(v);
                }
            }
            for j in 0..q {
                let v = ds.random[(r, j)];
                if v != 0.0 {
                    idx.push(p + j);
                    val.push(v);
                }
            }
            let s = &mut groups[ds.row_group[r]];
            counts[ds.row_group[r]] += 1;
            for a in 0..idx.len() {
                let va = val[a];
                for b in a..idx.len() {
                    s[(idx[a], idx[b])] += va * val[b];
                }
            }
        }
        for s in &mut groups {
            for i in 0..=d {
                for j in 0..i {
                    s[(i, j)] = s[(j, i)];
                }
            }
        }
        let mut out = Self {
            p,
            q,
            blocks: ds.meta.random_blocks.iter().map(|b| (b.start, b.len)).collect(),
            groups,
            counts,
            offset: DVector::zeros(p),
            response_ss: 0.0,
        };
        out.fill_response(ds, &ds.y);
        out
    }

    /// Same design cross-products with the response replaced.
    pub fn with_response(&self, ds: &DesignSet, y: &DVector<f64>) -> Self {
        let mut out = self.clone();
        out.fill_response(ds, y);
        out
    }

    /// Response column of the cross-products, computed from the OLS
    /// residuals so that `y'Py` does not cancel against `y'y`.
    fn fill_response(&mut self, ds: &DesignSet, y: &DVector<f64>) {
        let (p, d) = (self.p, self.dim());
        let mut cty = DVector::zeros(p);
        for r in 0..ds.n_rows() {
            for j in 0..p {
                cty[j] += ds.fixed[(r, j)] * y[r];
            }
        }
        self.response_ss = y.norm_squared();
        let ctc = self.total().view((0, 0), (p, p)).into_owned();
        self.offset = Cholesky::new(ctc).map(|c| c.solve(&cty)).unwrap_or_else(|| DVector::zeros(p));
        for s in &mut self.groups {
            for j in 0..=d {
                s[(j, d)] = 0.0;
                s[(d, j)] = 0.0;
            }
        }
        for r in 0..ds.n_rows() {
            let e = y[r] - ds.fixed.row(r).transpose().dot(&self.offset);
            let s = &mut self.groups[ds.row_group[r]];
            for j in 0..p {
                s[(j, d)] += ds.fixed[(r, j)] * e;
            }
            for j in 0..self.q {
                s[(p + j, d)] += ds.random[(r, j)] * e;
            }
            s[(d, d)] += e * e;
        }
        for s in &mut self.groups {
            for j in 0..d {
                s[(d, j)] = s[(j, d)];
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.p + self.q
    }

    pub fn n(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Unweighted sum over groups.
    pub fn total(&self) -> DMatrix<f64> {
        let mut m = self.groups[0].clone();
        for s in &self.groups[1..] {
            m += s;
        }
        m
    }

    fn weighted(&self, sigma_g2: &[f64]) -> DMatrix<f64> {
        let mut m = &self.groups[0] / sigma_g2[0];
        for (s, v) in self.groups.iter().zip(sigma_g2).skip(1) {
            m += s / *v;
        }
        m
    }

    fn scale_vector(&self, sigma_u2: &[f64]) -> Vec<f64> {
        let mut dv = vec![1.0; self.dim()];
        for (&(start, len), v) in self.blocks.iter().zip(sigma_u2) {
            let s = v.sqrt();
            for x in &mut dv[self.p + start..self.p + start + len] {
                *x = s;
            }
        }
        dv
    }
}

/// Likelihood value, fixed/random solution and score at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    /// `(beta, u)` on the natural scale.
    pub solution: DVector<f64>,
    /// Inverse of the scaled mixed-model matrix (full for REML, random
    /// block only for ML).
    pub trace_matrix: DMatrix<f64>,
    /// Score with respect to `ln sigma_k^2` for positive blocks; for blocks
    /// at zero, the one-sided derivative with respect to `sigma_k^2`.
    pub grad_blocks: Vec<f64>,
    pub grad_groups: Vec<f64>,
    pub rss_groups: Vec<f64>,
}

impl Evaluation {
    /// Fixed-effect covariance (REML trace matrix only).
    pub fn fixed_cov(&self, p: usize) -> DMatrix<f64> {
        self.trace_matrix.view((0, 0), (p, p)).into_owned()
    }
}

fn chol(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| {
        KdemError::numerical(format!("{what} is not positive definite (collinear design or degenerate variances)"))
    })
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Evaluate the criterion at `(sigma_u2, sigma_g2)`. With `with_score`
/// false only `loglik` and `solution` are meaningful.
pub fn evaluate(
    stats: &SuffStats,
    method: Method,
    sigma_u2: &[f64],
    sigma_g2: &[f64],
    with_score: bool,
) -> Result<Evaluation> {
    let mut out = evaluate_residual(stats, method, sigma_u2, sigma_g2, with_score)?;
    let mut beta = out.solution.rows_mut(0, stats.p);
    beta += &stats.offset;
    Ok(out)
}

fn evaluate_residual(
    stats: &SuffStats,
    method: Method,
    sigma_u2: &[f64],
    sigma_g2: &[f64],
    with_score: bool,
) -> Result<Evaluation> {
    let (p, q, d) = (stats.p, stats.q, stats.dim());
    if sigma_g2.iter().any(|v| !(v.is_finite() && *v > 0.0)) || sigma_u2.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(KdemError::numerical("variance parameters left the admissible region"));
    }
    let m = stats.weighted(sigma_g2);
    let dv = stats.scale_vector(sigma_u2);
    let mut a = DMatrix::from_fn(d, d, |i, j| dv[i] * dv[j] * m[(i, j)]);
    for i in p..d {
        a[(i, i)] += 1.0;
    }
    let r = DVector::from_fn(d, |i, _| dv[i] * m[(i, d)]);
    let a_chol = chol(a.clone(), "mixed-model matrix")?;
    let v = a_chol.solve(&r);
    let ypy = m[(d, d)] - v.dot(&r);
    let solution = DVector::from_fn(d, |i, _| dv[i] * v[i]);

    let n = stats.n() as f64;
    let ln_r: f64 = stats
        .counts
        .iter()
        .zip(sigma_g2)
        .map(|(&c, s)| c as f64 * s.ln())
        .sum();

    let (loglik, trace_matrix) = match method {
        Method::Reml => {
            let ll = -0.5 * ((n - p as f64) * LN_2PI + ln_r + log_det(&a_chol) + ypy);
            let t = if with_score { a_chol.inverse() } else { DMatrix::zeros(0, 0) };
            (ll, t)
        }
        Method::Ml => {
            let b_chol = chol(a.view((p, p), (q, q)).into_owned(), "random-effect block")?;
            let ll = -0.5 * (n * LN_2PI + ln_r + log_det(&b_chol) + ypy);
            let t = if with_score {
                let mut t = DMatrix::zeros(d, d);
                t.view_mut((p, p), (q, q)).copy_from(&b_chol.inverse());
                t
            } else {
                DMatrix::zeros(0, 0)
            };
            (ll, t)
        }
    };
    if !loglik.is_finite() {
        return Err(KdemError::numerical("likelihood is not finite"));
    }

    let mut out = Evaluation {
        loglik,
        solution,
        trace_matrix,
        grad_blocks: Vec::new(),
        grad_groups: Vec::new(),
        rss_groups: Vec::new(),
    };
    if !with_score {
        return Ok(out);
    }

    let t = &out.trace_matrix;
    let dtd = DMatrix::from_fn(d, d, |i, j| dv[i] * t[(i, j)] * dv[j]);
    let sol = &out.solution;

    for (k, &(start, len)) in stats.blocks.iter().enumerate() {
        let lo = p + start;
        if sigma_u2[k] > 0.0 {
            let tr: f64 = (lo..lo + len).map(|i| t[(i, i)]).sum();
            let vv: f64 = (lo..lo + len).map(|i| v[i] * v[i]).sum();
            out.grad_blocks.push(-0.5 * (len as f64 - tr - vv));
        } else {
            // Z_k' P y and tr(Z_k' P Z_k) with block k absent from the model.
            let mkw = m.view((lo, 0), (len, d));
            let zpy = m.view((lo, d), (len, 1)) - &mkw * sol;
            let tr_mkk: f64 = (lo..lo + len).map(|i| m[(i, i)]).sum();
            let prod = &mkw * &dtd;
            let tr_corr: f64 = (0..len).map(|i| prod.row(i).dot(&mkw.row(i))).sum();
            out.grad_blocks.push(0.5 * (zpy.norm_squared() - (tr_mkk - tr_corr)));
        }
    }

    for (g, s) in stats.groups.iter().enumerate() {
        let sww = s.view((0, 0), (d, d));
        let swy = s.view((0, d), (d, 1));
        let rss = s[(d, d)] - 2.0 * sol.dot(&swy) + sol.dot(&(sww * sol));
        let tr: f64 = dtd.component_mul(&sww).sum();
        let s2 = sigma_g2[g];
        out.grad_groups.push(-0.5 * (stats.counts[g] as f64 - tr / s2 - rss / s2));
        out.rss_groups.push(rss);
    }
    Ok(out)
}
