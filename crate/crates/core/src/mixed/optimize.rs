//! Maximization over log-variances: BFGS far from the optimum, Newton with a
//! finite-difference Hessian of the analytic score close to it. Random-effect
//! variances that shrink below a negligible level are pinned at zero and
//! released again when the one-sided derivative turns positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::reml::{evaluate, Evaluation, Method, SuffStats};
use crate::error::{KdemError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: Method,
    pub max_iterations: usize,
    /// Infinity norm of the log-scale score.
    pub grad_tol: f64,
    /// Largest relative change of a log-variance in the last step.
    pub step_tol: f64,
    /// Hold the random-effect variances at these values (zero removes a
    /// block); `None` estimates them.
    pub sigma_u2: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: Method::Reml,
            max_iterations: 500,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            sigma_u2: None,
        }
    }
}

impl FitOptions {
    pub fn ml() -> Self {
        Self {
            method: Method::Ml,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Convergence {
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Stopped because the criterion could not be improved at machine
    /// precision while the score was already below 1e-6.
    pub stalled: bool,
    /// Random-effect blocks held at zero at the solution.
    pub boundary: Vec<bool>,
}

pub(crate) struct Optimum {
    pub sigma_u2: Vec<f64>,
    pub sigma_g2: Vec<f64>,
    pub eval: Evaluation,
    pub convergence: Convergence,
    /// Covariance of `[sigma_u2, sigma_g2]` on the natural scale; rows of
    /// pinned or held blocks are zero.
    pub variance_cov: DMatrix<f64>,
}

const PIN_LEVEL: f64 = 1e-10;
const RELEASE_LEVEL: f64 = 1e-9;
const MAX_RELEASES: usize = 5;
const MAX_LOG_STEP: f64 = 4.0;
const NEWTON_SWITCH: f64 = 1e-2;
const STALL_GRAD: f64 = 1e-6;

struct Problem<'a> {
    stats: &'a SuffStats,
    opts: &'a FitOptions,
    evaluations: usize,
}

#[derive(Clone)]
struct State {
    log_u: Vec<f64>,
    pinned: Vec<bool>,
    log_g: Vec<f64>,
}

impl Problem<'_> {
    fn held(&self, k: usize) -> Option<f64> {
        self.opts.sigma_u2.as_ref().map(|v| v[k])
    }

    fn sigma_u2(&self, st: &State) -> Vec<f64> {
        (0..st.log_u.len())
            .map(|k| match self.held(k) {
                Some(v) => v,
                None if st.pinned[k] => 0.0,
                None => st.log_u[k].exp(),
            })
            .collect()
    }

    fn free_blocks(&self, st: &State) -> Vec<usize> {
        (0..st.log_u.len())
            .filter(|&k| self.held(k).is_none() && !st.pinned[k])
            .collect()
    }

    fn x(&self, st: &State) -> Vec<f64> {
        let mut x: Vec<f64> = self.free_blocks(st).iter().map(|&k| st.log_u[k]).collect();
        x.extend(&st.log_g);
        x
    }

    fn with_x(&self, st: &State, x: &[f64]) -> State {
        let mut out = st.clone();
        let free = self.free_blocks(st);
        for (i, &k) in free.iter().enumerate() {
            out.log_u[k] = x[i];
        }
        out.log_g.copy_from_slice(&x[free.len()..]);
        out
    }

    fn eval(&mut self, st: &State, score: bool) -> Result<Evaluation> {
        self.evaluations += 1;
        let sg: Vec<f64> = st.log_g.iter().map(|v| v.exp()).collect();
        evaluate(self.stats, self.opts.method, &self.sigma_u2(st), &sg, score)
    }

    fn grad(&self, st: &State, ev: &Evaluation) -> Vec<f64> {
        let mut g: Vec<f64> = self.free_blocks(st).iter().map(|&k| ev.grad_blocks[k]).collect();
        g.extend(&ev.grad_groups);
        g
    }

    /// Largest diagonal of `Z_k' R^-1 Z_k`, the scale against which a block
    /// variance counts as negligible.
    fn block_scale(&self, st: &State, k: usize) -> f64 {
        let (start, len) = self.stats.blocks[k];
        let lo = self.stats.p + start;
        (lo..lo + len)
            .map(|i| {
                self.stats
                    .groups
                    .iter()
                    .zip(&st.log_g)
                    .map(|(s, lg)| s[(i, i)] / lg.exp())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE)
    }

    fn hessian(&mut self, st: &State) -> Result<DMatrix<f64>> {
        let x = self.x(st);
        let n = x.len();
        let h = 1e-4;
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let sp = self.with_x(st, &xp);
            let sm = self.with_x(st, &xm);
            let gp = self.eval(&sp, true).map(|e| self.grad(&sp, &e))?;
            let gm = self.eval(&sm, true).map(|e| self.grad(&sm, &e))?;
            for j in 0..n {
                hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
            }
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }
}

/// Ascent direction `|H|^-1 g` with eigenvalues of the negated Hessian
/// replaced by their magnitude.
fn newton_direction(hess: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let eig = SymmetricEigen::new(-hess);
    let gv = DVector::from_column_slice(g);
    let floor = 1e-10 * eig.eigenvalues.amax().max(1e-300);
    let mut d = DVector::zeros(g.len());
    for (i, lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        d += v * (v.dot(&gv) / lam.abs().max(floor));
    }
    d.iter().copied().collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn starting_state(pb: &mut Problem) -> Result<State> {
    let stats = pb.stats;
    let (p, d) = (stats.p, stats.dim());
    let n = stats.n();
    let total = stats.total();
    let mcc = total.view((0, 0), (p, p)).into_owned();
    let mcy = total.view((0, d), (p, 1)).into_owned();
    check_rank(&mcc)?;
    let beta = mcc
        .cholesky()
        .ok_or_else(|| KdemError::numerical("fixed-effect columns are collinear"))?
        .solve(&mcy);
    let mut sol = DVector::zeros(d);
    sol.rows_mut(0, p).copy_from(&beta);
    let df = (n - p) as f64 / n as f64;
    let mut log_g = Vec::with_capacity(stats.groups.len());
    let mut rss_total = 0.0;
    for (s, &c) in stats.groups.iter().zip(&stats.counts) {
        let rss = s[(d, d)] - 2.0 * sol.dot(&s.view((0, d), (d, 1))) + sol.dot(&(s.view((0, 0), (d, d)) * &sol));
        rss_total += rss.max(0.0);
        log_g.push(rss.max(0.0) / c as f64 / df);
    }
    let mean_s2 = rss_total / (n - p) as f64;
    // Residuals below 1e-10 of the response scale are rounding noise.
    if !(rss_total > 1e-20 * stats.response_ss) {
        return Err(KdemError::numerical(
            "residual variance is zero: the response is an exact function of the fixed effects",
        ));
    }
    let log_g: Vec<f64> = log_g.iter().map(|v| v.max(1e-6 * mean_s2).ln()).collect();

    let nb = stats.blocks.len();
    let mut st = State {
        log_u: vec![0.0; nb],
        pinned: vec![false; nb],
        log_g,
    };
    if nb == 0 || pb.opts.sigma_u2.is_some() {
        return Ok(st);
    }
    // Coarse scan over a common block variance.
    let z_scale = (stats.p..d).map(|i| total[(i, i)]).sum::<f64>() / ((d - stats.p).max(1) * n) as f64;
    let base = mean_s2 / z_scale.max(f64::MIN_POSITIVE);
    st.pinned = vec![true; nb];
    let mut best = (pb.eval(&st, false)?.loglik, None);
    for j in -8..=4 {
        let lu = (base * 10f64.powi(j)).ln();
        let cand = State {
            log_u: vec![lu; nb],
            pinned: vec![false; nb],
            log_g: st.log_g.clone(),
        };
        if let Ok(e) = pb.eval(&cand, false) {
            if e.loglik > best.0 {
                best = (e.loglik, Some(lu));
            }
        }
    }
    match best.1 {
        Some(lu) => {
            st.log_u = vec![lu; nb];
            st.pinned = vec![false; nb];
        }
        None => st.log_u = vec![(base * 1e-8).ln(); nb],
    }
    Ok(st)
}

/// Smallest eigenvalue of the column-scaled cross-product, relative to the
/// largest, below which the fixed columns count as aliased.
const RANK_TOL: f64 = 1e-10;

fn check_rank(ctc: &DMatrix<f64>) -> Result<()> {
    let p = ctc.nrows();
    if p == 0 {
        return Ok(());
    }
    let inv_norm: Vec<f64> = (0..p).map(|i| 1.0 / ctc[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let scaled = DMatrix::from_fn(p, p, |i, j| ctc[(i, j)] * inv_norm[i] * inv_norm[j]);
    let ev = scaled.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > RANK_TOL * hi) {
        return Err(KdemError::numerical(format!(
            "fixed-effect columns are collinear (scaled eigenvalue ratio {:.1e})",
            lo / hi
        )));
    }
    Ok(())
}

pub(crate) fn maximize(stats: &SuffStats, opts: &FitOptions) -> Result<Optimum> {
    if let Some(v) = &opts.sigma_u2 {
        if v.len() != stats.blocks.len() || v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(KdemError::invalid("held random-effect variances do not match the design"));
        }
    }
    let mut pb = Problem {
        stats,
        opts,
        evaluations: 0,
    };
    let mut st = starting_state(&mut pb)?;
    let start_log_g = st.log_g.clone();
    let mut ev = pb.eval(&st, true)?;
    let mut hinv: Option<DMatrix<f64>> = None;
    let mut last_rel = f64::INFINITY;
    let mut releases = vec![0usize; stats.blocks.len()];
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;

        // Release pinned blocks whose one-sided derivative points inward.
        let mut released = false;
        for k in 0..st.pinned.len() {
            if st.pinned[k] && releases[k] < MAX_RELEASES {
                let scale = pb.block_scale(&st, k);
                if ev.grad_blocks[k] / scale > RELEASE_LEVEL {
                    st.pinned[k] = false;
                    st.log_u[k] = (1e-6 / scale).ln();
                    releases[k] += 1;
                    released = true;
                }
            }
        }
        if released {
            ev = pb.eval(&st, true)?;
            hinv = None;
            last_rel = f64::INFINITY;
        }

        let x = pb.x(&st);
        let g = pb.grad(&st, &ev);
        let gn = inf_norm(&g);
        if gn < opts.grad_tol && last_rel < opts.step_tol {
            converged = true;
            break;
        }

        let newton = gn < NEWTON_SWITCH;
        let mut dir = if newton {
            newton_direction(&pb.hessian(&st)?, &g)
        } else {
            let h = hinv.get_or_insert_with(|| DMatrix::identity(x.len(), x.len()) * (1.0 / gn.max(1.0)));
            (h.clone() * DVector::from_column_slice(&g)).iter().copied().collect()
        };
        if dot(&g, &dir) <= 0.0 {
            dir = g.iter().map(|v| v / gn.max(1.0)).collect();
            hinv = None;
        }
        // Newton decrement below the resolution of the criterion: no step
        // can improve it, e.g. along a flat direction near a zero variance.
        let noise = 1e-11 * ev.loglik.abs().max(1.0);
        if newton && gn < opts.grad_tol && 0.5 * dot(&g, &dir) < noise {
            converged = true;
            break;
        }
        let dn = inf_norm(&dir);
        if dn > MAX_LOG_STEP {
            dir.iter_mut().for_each(|v| *v *= MAX_LOG_STEP / dn);
        }

        // Backtracking with an Armijo condition; near the optimum a step
        // that keeps the criterion within rounding noise and shrinks the
        // score is also accepted.
        let slope = dot(&g, &dir);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            let sn = pb.with_x(&st, &xn);
            if let Ok(en) = pb.eval(&sn, true) {
                let armijo = en.loglik >= ev.loglik + 1e-4 * alpha * slope;
                let flat = en.loglik >= ev.loglik - noise && inf_norm(&pb.grad(&sn, &en)) < gn;
                if armijo || flat {
                    accepted = Some((sn, en, xn));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((sn, en, xn)) = accepted else {
            if gn < STALL_GRAD {
                converged = true;
                stalled = true;
                break;
            }
            if hinv.is_some() {
                hinv = None;
                continue;
            }
            return Err(not_converged(&pb, &st, &ev, iterations, gn));
        };

        last_rel = x
            .iter()
            .zip(&xn)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);

        // BFGS update of the inverse Hessian of -loglik.
        let gnew = pb.grad(&sn, &en);
        if let Some(h) = hinv.as_mut() {
            let s = DVector::from_iterator(x.len(), xn.iter().zip(&x).map(|(a, b)| a - b));
            let yv = DVector::from_iterator(x.len(), g.iter().zip(&gnew).map(|(a, b)| a - b));
            let sy = s.dot(&yv);
            if sy > 1e-12 * s.norm() * yv.norm() {
                if iterations == 1 {
                    *h = DMatrix::identity(x.len(), x.len()) * (sy / yv.norm_squared());
                }
                let rho = 1.0 / sy;
                let i = DMatrix::<f64>::identity(x.len(), x.len());
                let a = &i - &s * yv.transpose() * rho;
                let b = &i - &yv * s.transpose() * rho;
                *h = &a * &*h * &b + &s * s.transpose() * rho;
            }
        }
        st = sn;
        ev = en;

        if st
            .log_g
            .iter()
            .zip(&start_log_g)
            .any(|(lg, l0)| lg - l0 < -92.0)
        {
            return Err(KdemError::numerical(
                "a residual variance collapsed towards zero: the data are fitted exactly",
            ));
        }

        // Pin blocks whose variance became negligible, or that still head
        // for zero once the score is tiny and lose nothing when pinned.
        let mut pinned_now = false;
        let free = pb.free_blocks(&st);
        for (i, &k) in free.iter().enumerate() {
            let scale = pb.block_scale(&st, k);
            let pin = if st.log_u[k].exp() * scale < PIN_LEVEL {
                true
            } else if gn < STALL_GRAD && dir[i] < 0.0 {
                let mut trial = st.clone();
                trial.pinned[k] = true;
                pb.eval(&trial, true)
                    .map(|e| e.loglik >= ev.loglik - noise && e.grad_blocks[k] / scale <= RELEASE_LEVEL)
                    .unwrap_or(false)
            } else {
                false
            };
            if pin {
                st.pinned[k] = true;
                pinned_now = true;
            }
        }
        if pinned_now {
            ev = pb.eval(&st, true)?;
            hinv = None;
            last_rel = f64::INFINITY;
        }
    }

    if !converged {
        let gn = inf_norm(&pb.grad(&st, &ev));
        return Err(not_converged(&pb, &st, &ev, iterations, gn));
    }

    // Covariance of the free log-variances from the observed information.
    let nb = st.log_u.len();
    let free = pb.free_blocks(&st);
    let hess = pb.hessian(&st)?;
    let mut variance_cov = DMatrix::zeros(nb + st.log_g.len(), nb + st.log_g.len());
    if let Some(inv) = (-&hess).try_inverse() {
        let index: Vec<usize> = free.iter().copied().chain((0..st.log_g.len()).map(|g| nb + g)).collect();
        let sigma_u2 = pb.sigma_u2(&st);
        let natural = |i: usize| {
            if i < nb {
                sigma_u2[i]
            } else {
                st.log_g[i - nb].exp()
            }
        };
        for (a, &i) in index.iter().enumerate() {
            for (b, &j) in index.iter().enumerate() {
                variance_cov[(i, j)] = inv[(a, b)] * natural(i) * natural(j);
            }
        }
    } else {
        log::warn!("observed information is singular; variance standard errors unavailable");
    }

    let grad_norm = inf_norm(&pb.grad(&st, &ev));
    Ok(Optimum {
        sigma_u2: pb.sigma_u2(&st),
        sigma_g2: st.log_g.iter().map(|v| v.exp()).collect(),
        convergence: Convergence {
            iterations,
            evaluations: pb.evaluations,
            grad_norm,
            converged,
            stalled,
            boundary: (0..nb).map(|k| pb.sigma_u2(&st)[k] == 0.0).collect(),
        },
        eval: ev,
        variance_cov,
    })
}

fn not_converged(pb: &Problem, st: &State, ev: &Evaluation, iterations: usize, gn: f64) -> KdemError {
    let mut best = pb.sigma_u2(st);
    best.extend(st.log_g.iter().map(|v| v.exp()));
    KdemError::NotConverged {
        iterations,
        grad_norm: gn,
        loglik: ev.loglik,
        best_variances: best,
    }
}
