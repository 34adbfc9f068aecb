mod common;

use std::fs;

use kdem_core::ingest::{load_panel, write_panel_dir, IngestConfig, ValidationReport, INPUT_FILES, PURCHASES_FILE};
use kdem_core::synth;
use kdem_core::KdemError;

#[test]
fn written_panel_reloads_with_clamped_intakes() {
    let sp = common::small_panel(31);
    let dir = tempfile::tempdir().unwrap();
    write_panel_dir(dir.path(), &sp.panel, &synth::purchases(&sp.panel)).unwrap();
    let back = load_panel(dir.path(), &IngestConfig::default()).unwrap();

    assert_eq!(back.weeks, sp.panel.weeks);
    assert_eq!(back.socio_vars, sp.panel.socio_vars);
    assert_eq!(back.households.len(), sp.panel.households.len());
    for (a, b) in back.households.iter().zip(&sp.panel.households) {
        assert_eq!(a.household_id, b.household_id);
        assert_eq!(a.members, b.members);
        assert_eq!(a.socio, b.socio);
    }
    for (a, b) in back.intakes.iter().zip(&sp.panel.intakes) {
        for (x, y) in a.y.iter().zip(&b.y) {
            assert!((x - y.max(0.0)).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
    let report = ValidationReport::of(&back);
    assert_eq!(report.households, sp.panel.households.len());
    assert!(report.to_string().contains("households:"));
}

#[test]
fn empty_directory_lists_every_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    match load_panel(dir.path(), &IngestConfig::default()) {
        Err(KdemError::MissingFiles(files)) => assert_eq!(files.len(), INPUT_FILES.len()),
        other => panic!("unexpected {:?}", other.map(|p| p.weeks)),
    }
}

#[test]
fn unknown_food_group_is_a_validation_error() {
    let sp = common::small_panel(32);
    let dir = tempfile::tempdir().unwrap();
    write_panel_dir(dir.path(), &sp.panel, &synth::purchases(&sp.panel)).unwrap();
    let path = dir.path().join(PURCHASES_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str(&format!("{},1,Caviar,0.1\n", sp.panel.households[0].household_id));
    fs::write(&path, text).unwrap();
    let err = load_panel(dir.path(), &IngestConfig::default()).unwrap_err();
    assert!(matches!(err, KdemError::UnknownFoodGroups(ref g) if g == &["Caviar".to_string()]));
    assert!(err.is_validation());
}

#[test]
fn negative_quantity_is_rejected() {
    let sp = common::small_panel(33);
    let dir = tempfile::tempdir().unwrap();
    write_panel_dir(dir.path(), &sp.panel, &synth::purchases(&sp.panel)).unwrap();
    let path = dir.path().join(PURCHASES_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str(&format!("{},2,Fish,-0.5\n", sp.panel.households[0].household_id));
    fs::write(&path, text).unwrap();
    let err = load_panel(dir.path(), &IngestConfig::default()).unwrap_err();
    assert!(matches!(err, KdemError::NegativeQuantity { .. }), "{err}");
}
