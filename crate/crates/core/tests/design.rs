mod common;

use common::{rel_close, small_config, small_panel};
use kdem_core::design::{assemble, FixedColumn};
use kdem_core::mixed::{fit_reml, fitted_rows};
use kdem_core::model::ModelSpec;
use kdem_core::synth::{self, TruthConfig};

#[test]
fn household_rows_aggregate_member_rows() {
    let sp = small_panel(3);
    let ds = assemble(&sp.panel, &ModelSpec::default()).unwrap();
    for r in 0..ds.n_rows() {
        let h = &sp.panel.households[ds.row_household[r]];
        let t = ds.row_week[r];
        let active: Vec<_> = h.active_members(t).collect();
        assert_eq!(active.len(), ds.row_size[r]);
        let root = (active.len() as f64).sqrt();
        let mut x = vec![0.0; ds.fixed.ncols()];
        let mut z = vec![0.0; ds.random.ncols()];
        for m in &active {
            for (a, v) in x.iter_mut().zip(ds.meta.individual_fixed(m, t, h.socio_at(t))) {
                *a += v;
            }
            for (a, v) in z.iter_mut().zip(ds.meta.individual_random(m, t)) {
                *a += v;
            }
        }
        for j in 0..x.len() {
            assert!((ds.fixed[(r, j)] - x[j] / root).abs() < 1e-12, "row {r} fixed col {j}");
        }
        for j in 0..z.len() {
            assert!((ds.random[(r, j)] - z[j] / root).abs() < 1e-12, "row {r} random col {j}");
        }
        assert!((ds.y[r] - sp.panel.intakes[ds.row_household[r]].at(t) / root).abs() < 1e-12);
    }
}

#[test]
fn column_counts() {
    let sp = small_panel(4);
    let spec = ModelSpec::default();
    let ds = assemble(&sp.panel, &spec).unwrap();
    let levels: usize = ds.meta.socio_coding.iter().map(|c| c.levels.len()).sum();
    let kept_levels = ds
        .meta
        .fixed_columns
        .iter()
        .filter(|c| matches!(c, FixedColumn::Socio { .. }))
        .count();
    assert_eq!(levels, 13);
    assert_eq!(kept_levels + ds.meta.dropped.len(), levels);
    assert_eq!(ds.fixed.ncols(), 4 + kept_levels + sp.panel.weeks - 1);
    let knots: usize = ds.meta.bases.iter().map(|b| b.len()).sum();
    assert_eq!(ds.random.ncols(), knots);
    assert_eq!(ds.meta.random_blocks.len(), 1);

    let pooled = ModelSpec {
        gender_split: false,
        ..spec.clone()
    };
    let dp = assemble(&sp.panel, &pooled).unwrap();
    assert_eq!(dp.meta.n_beta(), 2);
    assert_eq!(dp.meta.bases.len(), 1);

    let split_penalty = ModelSpec {
        shared_penalty: false,
        ..spec
    };
    let ds2 = assemble(&sp.panel, &split_penalty).unwrap();
    let labels: Vec<_> = ds2.meta.random_blocks.iter().map(|b| b.label.as_str()).collect();
    assert_eq!(labels, ["sigma_uM", "sigma_uF"]);
}

#[test]
fn size_groups_partition_rows() {
    let sp = small_panel(5);
    let ds = assemble(&sp.panel, &ModelSpec::default()).unwrap();
    let total: usize = ds.meta.groups.iter().map(|g| g.rows).sum();
    assert_eq!(total, ds.n_rows());
    for r in 0..ds.n_rows() {
        assert!(ds.meta.groups[ds.row_group[r]].sizes.contains(&ds.row_size[r]));
    }
}

#[test]
fn fitted_values_do_not_depend_on_reference_choice() {
    let cfg = TruthConfig {
        households: 120,
        ..small_config(6)
    };
    let sp = synth::generate(&cfg).unwrap();
    let base = ModelSpec::default();
    let other = ModelSpec {
        reference_week: 5,
        reference_modalities: Some(vec![2, 3, 2, 2]),
        ..base.clone()
    };
    let a = assemble(&sp.panel, &base).unwrap();
    let b = assemble(&sp.panel, &other).unwrap();
    assert!(a.meta.dropped.is_empty() && b.meta.dropped.is_empty());
    let fa = fit_reml(&a).unwrap();
    let fb = fit_reml(&b).unwrap();
    assert!(rel_close(fa.loglik, fb.loglik, 1e-10), "{} vs {}", fa.loglik, fb.loglik);
    let ya = fitted_rows(&fa, &a);
    let yb = fitted_rows(&fb, &b);
    for r in 0..a.n_rows() {
        assert!(rel_close(ya[r], yb[r], 1e-8), "row {r}: {} vs {}", ya[r], yb[r]);
    }
}
