#![allow(dead_code)]

use kdem_core::design::DesignSet;
use kdem_core::model::PanelData;
use kdem_core::synth::{self, SyntheticPanel, TruthConfig};
use nalgebra::DVector;

pub fn small_config(seed: u64) -> TruthConfig {
    TruthConfig {
        households: 40,
        weeks: 8,
        sigma_eps2: 400.0,
        seed,
        ..TruthConfig::default()
    }
}

pub fn small_panel(seed: u64) -> SyntheticPanel {
    synth::generate(&small_config(seed)).unwrap()
}

/// Rescaled response of `panel` on the rows of `ds` (same households).
pub fn response(ds: &DesignSet, panel: &PanelData) -> DVector<f64> {
    DVector::from_fn(ds.n_rows(), |r, _| {
        panel.intakes[ds.row_household[r]].at(ds.row_week[r]) / (ds.row_size[r] as f64).sqrt()
    })
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
