//! Individual intake predictions from a fitted household model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FitResult;
use crate::design::DesignSet;
use crate::error::{KdemError, Result};
use crate::model::{Member, PanelData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntakeRow {
    pub member: Member,
    /// Week `t` at index `t - 1`; zero in inactive weeks.
    pub raw: Vec<f64>,
    pub active: Vec<bool>,
}

impl IntakeRow {
    pub fn clamped(&self) -> Vec<f64> {
        self.raw.iter().map(|v| v.max(0.0)).collect()
    }
}

/// Predicted weekly intakes (µg) for every member of a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntakeMatrix {
    pub weeks: usize,
    pub rows: Vec<IntakeRow>,
}

impl IntakeMatrix {
    /// Count of active member-weeks with a negative raw prediction.
    pub fn negative_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.raw.iter().zip(&r.active).filter(|(v, a)| **a && **v < 0.0).count())
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weeks: self.weeks,
            rows: self
                .rows
                .iter()
                .map(|r| IntakeRow {
                    raw: r.raw.iter().map(|v| v * factor).collect(),
                    ..r.clone()
                })
                .collect(),
        }
    }
}

/// `x beta + z u + w gamma + delta alpha` for every active member-week,
/// members ordered by household then member id.
pub fn predict_individual(fit: &FitResult, panel: &PanelData) -> Result<IntakeMatrix> {
    if panel.socio_vars.len() != fit.meta.socio_variables.len() {
        return Err(KdemError::invalid(format!(
            "panel has {} socio variables, fit has {}",
            panel.socio_vars.len(),
            fit.meta.socio_variables.len()
        )));
    }
    let rows = panel
        .households
        .par_iter()
        .flat_map_iter(|h| {
            h.members.iter().map(move |m| {
                let mut raw = vec![0.0; panel.weeks];
                let mut active = vec![false; panel.weeks];
                for t in 1..=panel.weeks {
                    if !m.is_active(t as i64) {
                        continue;
                    }
                    let x = fit.meta.individual_fixed(m, t, h.socio_at(t));
                    let z = fit.meta.individual_random(m, t);
                    let v: f64 = x.iter().zip(&fit.fixed).map(|(a, b)| a * b).sum::<f64>()
                        + z.iter().zip(&fit.u_blup).map(|(a, b)| a * b).sum::<f64>();
                    raw[t - 1] = v;
                    active[t - 1] = true;
                }
                IntakeRow {
                    member: m.clone(),
                    raw,
                    active,
                }
            })
        })
        .collect();
    Ok(IntakeMatrix {
        weeks: panel.weeks,
        rows,
    })
}

/// Rescaled household residuals `Y - C theta_hat - Z u_hat`, one per design row.
pub fn household_residuals(fit: &FitResult, design: &DesignSet) -> Vec<f64> {
    let fitted = super::fitted_rows(fit, design);
    design.y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect()
}
