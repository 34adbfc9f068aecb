//! Tests on fitted models: Wald F-tests of linear hypotheses, likelihood
//! ratio tests, and the stepwise merging of socio modalities.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::design::{assemble, default_coding, SocioCoding};
use crate::error::{KdemError, Result};
use crate::mixed::{fit, fit_ml, fit_reml, FitOptions, FitResult, Method, VarianceDecomposition};
use crate::model::{ModelSpec, PanelData};

pub const SIGNIFICANCE: f64 = 0.05;

/// `C theta = 0` over the fixed-effect vector of a particular fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHypothesis {
    pub label: String,
    pub text: String,
    pub contrast: DMatrix<f64>,
}

fn term(token: &str, names: &[String]) -> Result<Option<usize>> {
    let t = token.trim();
    if t.is_empty() {
        return Err(KdemError::Hypothesis("empty term".into()));
    }
    if t.parse::<f64>().is_ok_and(|v| v == 0.0) {
        return Ok(None);
    }
    names.iter().position(|n| n == t).map(Some).ok_or_else(|| {
        KdemError::Hypothesis(format!("unknown parameter `{t}`; available: {}", names.join(" ")))
    })
}

impl LinearHypothesis {
    /// Parse `a=b=...` chains, several separated by `;` or `,`. Each chain
    /// `t0=t1=...=tk` adds the constraints `t0 - ti = 0`; a term `0` is the
    /// constant zero.
    pub fn parse(label: &str, text: &str, names: &[String]) -> Result<Self> {
        let p = names.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for chain in text.split([';', ',']).filter(|c| !c.trim().is_empty()) {
            let terms = chain
                .split('=')
                .map(|t| term(t, names))
                .collect::<Result<Vec<_>>>()?;
            if terms.len() < 2 {
                return Err(KdemError::Hypothesis(format!("`{chain}` has no `=`")));
            }
            for t in &terms[1..] {
                let mut row = vec![0.0; p];
                if let Some(i) = terms[0] {
                    row[i] += 1.0;
                }
                if let Some(j) = *t {
                    row[j] -= 1.0;
                }
                if row.iter().all(|v| *v == 0.0) {
                    return Err(KdemError::Hypothesis(format!("`{chain}` contains a trivial constraint")));
                }
                rows.push(row);
            }
        }
        if rows.is_empty() {
            return Err(KdemError::Hypothesis(format!("`{text}` has no constraints")));
        }
        let contrast = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        let h = Self {
            label: label.to_string(),
            text: text.trim().to_string(),
            contrast,
        };
        h.check_rank()?;
        Ok(h)
    }

    pub fn from_matrix(label: &str, contrast: DMatrix<f64>) -> Result<Self> {
        let h = Self {
            label: label.to_string(),
            text: label.to_string(),
            contrast,
        };
        h.check_rank()?;
        Ok(h)
    }

    pub fn rank(&self) -> usize {
        let c = &self.contrast;
        let scale = c.amax().max(f64::MIN_POSITIVE);
        c.clone().svd(false, false).rank(1e-10 * scale * c.nrows().max(c.ncols()) as f64)
    }

    fn check_rank(&self) -> Result<()> {
        let r = self.rank();
        if r < self.contrast.nrows() {
            return Err(KdemError::Hypothesis(format!(
                "`{}` has {} constraints but rank {r}",
                self.text,
                self.contrast.nrows()
            )));
        }
        Ok(())
    }
}

/// Read `label,hypothesis` rows.
pub fn read_hypotheses(path: &Path, names: &[String]) -> Result<Vec<LinearHypothesis>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| KdemError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| KdemError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let (label, text) = match (rec.get(0), rec.get(1)) {
            (Some(l), Some(t)) => (l, t),
            _ => return Err(KdemError::Hypothesis(format!("{}: rows need label and hypothesis", path.display()))),
        };
        out.push(LinearHypothesis::parse(label, text, names)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    F,
    T,
    Lrt,
    LrtBoundary,
    Wald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub label: String,
    pub hypothesis: String,
    pub kind: TestKind,
    pub statistic: f64,
    pub df1: f64,
    pub df2: Option<f64>,
    pub p_value: f64,
    pub reject: bool,
}

impl TestReport {
    fn new(label: &str, hypothesis: &str, kind: TestKind, statistic: f64, df1: f64, df2: Option<f64>, p: f64) -> Self {
        let p = p.clamp(0.0, 1.0);
        Self {
            label: label.to_string(),
            hypothesis: hypothesis.to_string(),
            kind,
            statistic,
            df1,
            df2,
            p_value: p,
            reject: p < SIGNIFICANCE,
        }
    }
}

/// Wald F statistic `(C t)' (C V C')^-1 (C t) / rank` with `n - p`
/// denominator degrees of freedom.
pub fn f_test(fit: &FitResult, hyp: &LinearHypothesis) -> Result<TestReport> {
    let p = fit.fixed.len();
    if hyp.contrast.ncols() != p {
        return Err(KdemError::Hypothesis(format!(
            "contrast has {} columns, fit has {p} fixed effects",
            hyp.contrast.ncols()
        )));
    }
    let c = &hyp.contrast;
    let theta = DVector::from_column_slice(&fit.fixed);
    let ct = c * theta;
    let middle = c * fit.fixed_cov_matrix() * c.transpose();
    let inv = middle
        .cholesky()
        .ok_or_else(|| KdemError::Hypothesis(format!("`{}`: contrast covariance is singular", hyp.text)))?;
    let r = c.nrows() as f64;
    let stat = ct.dot(&inv.solve(&ct)) / r;
    let df2 = fit.residual_df() as f64;
    let dist = FisherSnedecor::new(r, df2).map_err(|e| KdemError::numerical(e.to_string()))?;
    let pval = if stat <= 0.0 { 1.0 } else { dist.sf(stat) };
    Ok(TestReport::new(&hyp.label, &hyp.text, TestKind::F, stat, r, Some(df2), pval))
}

/// Two-sided t-test p-value of each fixed effect against zero.
pub fn coefficient_p_values(fit: &FitResult) -> Vec<f64> {
    let dist = StudentsT::new(0.0, 1.0, fit.residual_df() as f64).expect("positive degrees of freedom");
    fit.fixed
        .iter()
        .zip(fit.fixed_se())
        .map(|(b, se)| {
            if se > 0.0 {
                (2.0 * dist.sf((b / se).abs())).min(1.0)
            } else {
                f64::NAN
            }
        })
        .collect()
}

fn lambda(full: &FitResult, reduced: &FitResult) -> Result<f64> {
    if full.n_rows != reduced.n_rows {
        return Err(KdemError::invalid("models were fitted to different rows"));
    }
    if full.method != reduced.method {
        return Err(KdemError::invalid("cannot compare REML and ML likelihoods"));
    }
    if full.method == Method::Reml && full.meta.fixed_names != reduced.meta.fixed_names {
        return Err(KdemError::invalid(
            "restricted likelihoods are only comparable with identical fixed effects; refit with ML",
        ));
    }
    let l = 2.0 * (full.loglik - reduced.loglik);
    if l < -1e-6 {
        return Err(KdemError::numerical(format!(
            "likelihood ratio statistic {l} is negative: models not nested or not converged"
        )));
    }
    Ok(l.max(0.0))
}

/// `2 (l_full - l_reduced)` against a chi-square with `df` degrees of freedom.
pub fn lrt(full: &FitResult, reduced: &FitResult, df: usize, label: &str) -> Result<TestReport> {
    let l = lambda(full, reduced)?;
    Ok(lrt_from_statistic(l, df, label))
}

pub fn lrt_from_statistic(l: f64, df: usize, label: &str) -> TestReport {
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    let p = if l <= 0.0 { 1.0 } else { dist.sf(l) };
    TestReport::new(label, label, TestKind::Lrt, l, df as f64, None, p)
}

/// One variance component at zero under the null: the statistic follows
/// an equal mixture of a point mass at zero and a chi-square with 1 df.
pub fn lrt_boundary(full: &FitResult, reduced: &FitResult, label: &str) -> Result<TestReport> {
    if full.sigma_u2.len() != reduced.sigma_u2.len() {
        return Err(KdemError::invalid("models differ in their random-effect blocks"));
    }
    let newly_zero = full
        .sigma_u2
        .iter()
        .zip(&reduced.sigma_u2)
        .filter(|(f, r)| **r == 0.0 && **f != 0.0)
        .count();
    if newly_zero > 1 || !reduced.sigma_u2.contains(&0.0) {
        return Err(KdemError::invalid("reduced model must set exactly one variance component to zero"));
    }
    let l = lambda(full, reduced)?;
    Ok(lrt_boundary_from_statistic(l, label))
}

pub fn lrt_boundary_from_statistic(l: f64, label: &str) -> TestReport {
    let p = if l <= 0.0 {
        1.0
    } else {
        0.5 * ChiSquared::new(1.0).expect("1 df").sf(l)
    };
    TestReport::new(label, label, TestKind::LrtBoundary, l, 1.0, None, p)
}

/// Wald test of `rho = 0` from the decomposition's delta-method error.
pub fn rho_test(d: &VarianceDecomposition) -> Result<TestReport> {
    let se = d
        .se_rho
        .filter(|s| *s > 0.0)
        .ok_or_else(|| KdemError::invalid("no standard error for rho"))?;
    let z = d.rho / se;
    let p = 2.0 * Normal::standard().sf(z.abs());
    Ok(TestReport::new("rho", "rho=0", TestKind::Wald, z, 1.0, None, p))
}

/// Test of the penalized-spline variance (REML, null: `sigma_u^2 = 0`).
pub fn spline_variance_test(full: &FitResult, design: &crate::design::DesignSet) -> Result<TestReport> {
    let opts = FitOptions {
        sigma_u2: Some(vec![0.0; full.sigma_u2.len()]),
        method: full.method,
        ..FitOptions::default()
    };
    let reduced = fit(design, &opts)?;
    lrt_boundary(full, &reduced, "sigma_u2=0")
}

/// Likelihood ratio test of a common age curve for both sexes, using ML
/// fits since the fixed effects differ.
pub fn gender_curve_test(panel: &PanelData, spec: &ModelSpec) -> Result<TestReport> {
    let split = ModelSpec {
        gender_split: true,
        ..spec.clone()
    };
    let pooled = ModelSpec {
        gender_split: false,
        shared_penalty: true,
        ..spec.clone()
    };
    let full = fit_ml(&assemble(panel, &split)?)?;
    let reduced = fit_ml(&assemble(panel, &pooled)?)?;
    let df = full.meta.n_fixed() - reduced.meta.n_fixed();
    lrt(&full, &reduced, df, "f_M=f_F")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeStep {
    pub round: usize,
    pub tests: Vec<TestReport>,
    /// The merge made after this round, if any test was not rejected.
    pub merged: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchicalResult {
    pub steps: Vec<MergeStep>,
    pub coding: Vec<SocioCoding>,
    pub initial: FitResult,
    pub fit: FitResult,
    /// F-test of all merges jointly on the initial fit.
    pub overall: Option<TestReport>,
}

impl HierarchicalResult {
    /// The test behind each merge, in order, then the joint test of all
    /// merges on the initial fit.
    pub fn reported_tests(&self) -> Vec<TestReport> {
        let mut out: Vec<TestReport> = self
            .steps
            .iter()
            .filter(|s| s.merged.is_some())
            .filter_map(|s| s.tests.iter().max_by(|a, b| a.p_value.total_cmp(&b.p_value)).cloned())
            .collect();
        out.extend(self.overall.clone());
        out
    }
}

fn level_names(coding: &[SocioCoding]) -> Vec<(usize, usize, String)> {
    coding
        .iter()
        .enumerate()
        .flat_map(|(q, c)| c.levels.iter().enumerate().map(move |(l, lv)| (q, l, lv.name.clone())))
        .collect()
}

/// Stepwise simplification of the socio coding: first merge the modality
/// least different from its reference while any is not significant, then
/// merge the least different pair of modalities within a variable. One merge
/// per refit.
pub fn hierarchical_tests(panel: &PanelData, spec: &ModelSpec) -> Result<HierarchicalResult> {
    let mut coding = match &spec.socio_coding {
        Some(c) => c.clone(),
        None => default_coding(&panel.socio_vars, spec.reference_modalities.as_deref())?,
    };
    let refit = |coding: &[SocioCoding]| -> Result<FitResult> {
        let s = ModelSpec {
            socio_coding: Some(coding.to_vec()),
            ..spec.clone()
        };
        fit_reml(&assemble(panel, &s)?)
    };
    let initial = refit(&coding)?;
    let mut current = initial.clone();
    let mut steps = Vec::new();

    for pairwise in [false, true] {
        loop {
            let names = &current.meta.fixed_names;
            let mut tests = Vec::new();
            let mut candidates = Vec::new();
            let levels: Vec<_> = level_names(&coding)
                .into_iter()
                .filter(|(_, _, n)| names.contains(n))
                .collect();
            if !pairwise {
                for (q, l, n) in &levels {
                    let h = LinearHypothesis::parse(&format!("{n}=0"), &format!("{n}=0"), names)?;
                    let r = f_test(&current, &h)?;
                    candidates.push((r.p_value, *q, *l, None));
                    tests.push(r);
                }
            } else {
                for (i, (q, l, n)) in levels.iter().enumerate() {
                    for (q2, l2, n2) in &levels[i + 1..] {
                        if q != q2 {
                            continue;
                        }
                        let text = format!("{n}={n2}");
                        let h = LinearHypothesis::parse(&text, &text, names)?;
                        let r = f_test(&current, &h)?;
                        candidates.push((r.p_value, *q, *l, Some(*l2)));
                        tests.push(r);
                    }
                }
            }
            let best = candidates
                .iter()
                .filter(|c| c.0 > SIGNIFICANCE)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .cloned();
            let merged = best.map(|(_, q, l, other)| match other {
                None => {
                    let text = format!("{} into reference of {}", coding[q].levels[l].name, coding[q].variable);
                    coding[q].merge_into_reference(l);
                    text
                }
                Some(l2) => {
                    let text = format!("{} with {}", coding[q].levels[l].name, coding[q].levels[l2].name);
                    coding[q].merge_levels(l, l2);
                    text
                }
            });
            let done = merged.is_none();
            steps.push(MergeStep {
                round: steps.len() + 1,
                tests,
                merged,
            });
            if done {
                break;
            }
            current = refit(&coding)?;
        }
    }

    let overall = merge_hypothesis(&initial, &coding)?
        .map(|h| f_test(&initial, &h))
        .transpose()?;
    Ok(HierarchicalResult {
        steps,
        coding,
        initial,
        fit: current,
        overall,
    })
}

/// Constraints on `initial`'s coefficients that yield `coding`.
fn merge_hypothesis(initial: &FitResult, coding: &[SocioCoding]) -> Result<Option<LinearHypothesis>> {
    let names = &initial.meta.fixed_names;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut text = Vec::new();
    for q in &initial.meta.socio_coding {
        let finalc = coding.iter().find(|c| c.variable == q.variable).expect("same variables");
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); finalc.levels.len()];
        for lv in &q.levels {
            let Some(idx) = names.iter().position(|n| *n == lv.name) else {
                continue;
            };
            let code = lv.codes[0];
            if finalc.reference.contains(&code) {
                let mut row = vec![0.0; names.len()];
                row[idx] = 1.0;
                rows.push(row);
                text.push(format!("{}=0", lv.name));
            } else if let Some(g) = finalc.level_of(code) {
                groups[g].push(idx);
            }
        }
        for g in groups.iter().filter(|g| g.len() > 1) {
            for &j in &g[1..] {
                let mut row = vec![0.0; names.len()];
                row[g[0]] = 1.0;
                row[j] = -1.0;
                rows.push(row);
                text.push(format!("{}={}", names[g[0]], names[j]));
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let c = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    let mut h = LinearHypothesis::from_matrix("final vs initial", c)?;
    h.text = text.join("; ");
    Ok(Some(h))
}
