use std::sync::OnceLock;

use gfflab::green::GreenTable;
use gfflab::lab::{read_results, write_outputs, EstimatorKind, Experiment, ExperimentConfig, RESULTS_HEADER};

fn table() -> &'static GreenTable {
    static T: OnceLock<GreenTable> = OnceLock::new();
    T.get_or_init(|| GreenTable::new(3).unwrap())
}

fn config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "dim": 3, "n": 8, "m": 0.5,
            "shape": {"kind": "l-inf-ball", "center": [0, 0, 0], "radius": 0.2, "enclosing_m": 0.5},
            "levels": {"alpha": 0.0, "delta": 0.1, "gamma": 0.2, "h_bar_est": 1.0},
            "eps": 0.25,
            "test_functions": [{"kind": "tent", "center": [0, 0, 0], "radius": 0.45}],
            "functionals": [{"kind": "clipped-site", "offset": [0, 0, 0], "lo": -1.0, "hi": 1.0}],
            "budgets": {"samples": 1280, "inner": 20, "min_ess": 20},
            "dump_fields": true,
            "seed": 7
        }"#,
    )
    .unwrap()
}

#[test]
fn pushdown_is_reproducible_and_written_out() {
    let cfg = config();
    let a = Experiment::Pushdown.run(table(), &cfg).unwrap();
    let b = Experiment::Pushdown.run(table(), &cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert!(!a.fields.is_empty());
    let m = a.estimate("N=8/hbar=1/eta0/cond_mean").unwrap();
    assert!(m.value.is_finite() && m.se > 0.0);
    let w = a.estimate("N=8/hbar=1/weight_mean").unwrap();
    assert!(w.z_exact(1.0) < 4.0, "{w:?}");

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &cfg, std::slice::from_ref(&a)).unwrap();
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(RESULTS_HEADER));
    let rows = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), a.rows.len());
    for (r, s) in rows.iter().zip(&a.rows) {
        assert_eq!((&r.experiment, &r.key, r.value, r.se), (&s.experiment, &s.key, s.value, s.se));
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["n"], 8);
    let fields: Vec<_> = std::fs::read_dir(dir.path().join("fields")).unwrap().collect();
    assert_eq!(fields.len(), a.fields.len());
}

#[test]
fn rejection_and_tilted_probabilities_agree() {
    let mut cfg = config();
    cfg.budgets.samples = 4096;
    let tilted = Experiment::DisconnectProb.run(table(), &cfg).unwrap();
    cfg.estimator = EstimatorKind::Rejection;
    let rejection = Experiment::DisconnectProb.run(table(), &cfg).unwrap();
    let (t, r) = (tilted.estimate("N=8/p_disconnect").unwrap(), rejection.estimate("N=8/p_disconnect").unwrap());
    assert!(t.z_against(&r) < 4.0, "{t:?} vs {r:?}");
    assert!(tilted.get("N=8/calibration/max_abs_z").is_some());
    assert!(rejection.get("N=8/calibration/max_abs_z").is_none());
    assert!(r.value > 0.0 && r.value < 1.0);
}

#[test]
fn potential_report_carries_the_oracles() {
    let cfg = config();
    let r = Experiment::Potential.run(table(), &cfg).unwrap();
    let g0 = r.get("g0").unwrap().value;
    assert!((r.get("cap/origin").unwrap().value - 1.0 / g0).abs() < 1e-12);
    assert!((r.get("cap/pair").unwrap().value - 2.0 / (2.0 * g0 - 1.0)).abs() < 1e-12);
    let far = r.get("g_ratio/e0*64").unwrap().value;
    assert!((far - 1.0).abs() < 0.01, "{far}");
}

#[test]
fn incomplete_or_inconsistent_configs_are_rejected() {
    assert!(ExperimentConfig::from_json(r#"{"dim": 3}"#).is_err());
    let mut cfg = config();
    cfg.levels.alpha = 2.0;
    assert!(cfg.validate().is_err());
}
