//! Estimate and test tables as CSV.

use std::path::Path;

use crate::error::{KdemError, Result};
use crate::inference::{coefficient_p_values, TestReport};
use crate::mixed::{FitResult, VarianceDecomposition};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|source| KdemError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> KdemError + '_ {
    move |source| KdemError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Socio effects grouped by variable: a header row naming the reference,
/// then one row per coded level.
fn socio_rows(fit: &FitResult) -> Vec<[String; 5]> {
    let p = coefficient_p_values(fit);
    let se = fit.fixed_se();
    let mut rows = Vec::new();
    for c in &fit.meta.socio_coding {
        rows.push([
            format!("{} (ref: {})", c.variable, c.reference_label),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ]);
        for lv in &c.levels {
            let Some(i) = fit.meta.fixed_index(&lv.name) else {
                continue;
            };
            rows.push([lv.label.clone(), lv.name.clone(), num(fit.fixed[i]), num(p[i]), num(se[i])]);
        }
    }
    rows
}

/// Socio estimates with t-test p-values: `effect,parameter,estimate,p_value`.
pub fn write_estimates_table(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = writer(path)?;
    let e = csv_err(path);
    w.write_record(["effect", "parameter", "estimate", "p_value"]).map_err(&e)?;
    for r in socio_rows(fit) {
        w.write_record(&r[..4]).map_err(&e)?;
    }
    w.flush().map_err(|source| KdemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Socio estimates followed by the variance components:
/// `effect,parameter,estimate,p_value,se`.
pub fn write_final_table(path: &Path, fit: &FitResult, decomposition: Option<&VarianceDecomposition>) -> Result<()> {
    let mut w = writer(path)?;
    let e = csv_err(path);
    w.write_record(["effect", "parameter", "estimate", "p_value", "se"]).map_err(&e)?;
    for r in socio_rows(fit) {
        let row = [r[0].clone(), r[1].clone(), r[2].clone(), r[3].clone(), String::new()];
        w.write_record(&row).map_err(&e)?;
    }
    for (k, b) in fit.meta.random_blocks.iter().enumerate() {
        let s2 = fit.sigma_u2[k];
        let sd = s2.sqrt();
        let se_sd = fit.sigma_u2_se[k].filter(|_| sd > 0.0).map(|s| s / (2.0 * sd));
        w.write_record([
            "Variance of the random effect".to_string(),
            b.label.clone(),
            num(sd),
            String::new(),
            se_sd.map(num).unwrap_or_default(),
        ])
        .map_err(&e)?;
    }
    if let Some(d) = decomposition {
        w.write_record(["Variance-covariance structure", "", "", "", ""]).map_err(&e)?;
        w.write_record([
            "variance".to_string(),
            "sigma2".to_string(),
            num(d.sigma_eps2),
            String::new(),
            d.se_sigma_eps2.map(num).unwrap_or_default(),
        ])
        .map_err(&e)?;
        w.write_record([
            "correlation".to_string(),
            "rho".to_string(),
            num(d.rho),
            String::new(),
            d.se_rho.map(num).unwrap_or_default(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|source| KdemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `null_hypothesis,p_value`, rows labelled `H1`, `H2`, ...
pub fn write_tests_table(path: &Path, tests: &[TestReport]) -> Result<()> {
    let mut w = writer(path)?;
    let e = csv_err(path);
    w.write_record(["null_hypothesis", "p_value"]).map_err(&e)?;
    for (i, t) in tests.iter().enumerate() {
        w.write_record([format!("H{} : {}", i + 1, t.hypothesis), num(t.p_value)])
            .map_err(&e)?;
    }
    w.flush().map_err(|source| KdemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Every test with its statistic and degrees of freedom.
pub fn write_test_reports(path: &Path, tests: &[TestReport]) -> Result<()> {
    let mut w = writer(path)?;
    let e = csv_err(path);
    w.write_record(["label", "hypothesis", "kind", "statistic", "df1", "df2", "p_value", "reject_5pct"])
        .map_err(&e)?;
    for t in tests {
        w.write_record([
            t.label.clone(),
            t.hypothesis.clone(),
            format!("{:?}", t.kind),
            num(t.statistic),
            num(t.df1),
            t.df2.map(num).unwrap_or_default(),
            num(t.p_value),
            t.reject.to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|source| KdemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// All fixed effects: `parameter,estimate,se,p_value`.
pub fn write_fixed_effects(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = writer(path)?;
    let e = csv_err(path);
    let p = coefficient_p_values(fit);
    let se = fit.fixed_se();
    w.write_record(["parameter", "estimate", "se", "p_value"]).map_err(&e)?;
    for (i, name) in fit.meta.fixed_names.iter().enumerate() {
        w.write_record([name.clone(), num(fit.fixed[i]), num(se[i]), num(p[i])])
            .map_err(&e)?;
    }
    w.flush().map_err(|source| KdemError::Io {
        path: path.to_path_buf(),
        source,
    })
}
