use thickflow::harness::{self, scenarios, ExperimentConfig};
use thickflow::Error;

const MINIMAL: &str = r#"
scenario = "tiny"

[domain]
nx = 8
ny = 8

[solver]
nu = 0.1
eps = 0.2
steps = 4

[threshold]
kind = "constant"
value = 1.0
psi_star = 1.0
psi_upper = 1.0
"#;

#[test]
fn every_builtin_scenario_parses_and_resolves() {
    for (name, _) in scenarios::SCENARIOS {
        let cfg = scenarios::builtin(name).unwrap();
        cfg.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }
    assert!(matches!(scenarios::builtin("nope"), Err(Error::Config(_))));
}

#[test]
fn missing_threshold_bound_names_the_field() {
    for field in ["psi_star", "psi_upper"] {
        let text: String = MINIMAL
            .lines()
            .filter(|l| !l.starts_with(field))
            .collect::<Vec<_>>()
            .join("\n");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config(m)) => assert!(m.contains(field), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn malformed_values_are_reported() {
    let bad_expr = format!("{MINIMAL}\n[forcing]\nfx = \"sin(x\"\n");
    let cfg = ExperimentConfig::from_toml_str(&bad_expr).unwrap();
    match cfg.resolve() {
        Err(Error::Config(m)) => assert!(m.contains("forcing.fx"), "{m}"),
        other => panic!("{other:?}"),
    }
    let unknown = MINIMAL.replace("eps = 0.2", "eps = 0.2\nepsilon = 3");
    match ExperimentConfig::from_toml_str(&unknown) {
        Err(Error::Config(m)) => assert!(m.contains("epsilon"), "{m}"),
        other => panic!("{other:?}"),
    }
    let inverted = MINIMAL.replace("psi_upper = 1.0", "psi_upper = 0.5");
    assert!(matches!(
        ExperimentConfig::from_toml_str(&inverted),
        Err(Error::Config(_))
    ));
    let norm = MINIMAL.replace("kind = \"constant\"", "kind = \"norm\"");
    match ExperimentConfig::from_toml_str(&norm).unwrap().resolve() {
        Err(Error::Config(m)) => assert!(m.contains("threshold.alpha"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_data_gives_zero_summaries() {
    let rec = harness::cmd_solve(&scenarios::builtin("zero").unwrap()).unwrap();
    let s = &rec.summary;
    for v in [
        s.max_constraint_excess,
        s.final_energy,
        s.complementarity,
        s.multiplier_mass,
        s.momentum_residual,
        s.max_div_residual,
        s.max_velocity,
        s.energy_residual,
        s.linf_l2,
        s.forcing_l2,
    ] {
        assert_eq!(v, 0.0);
    }
    assert_eq!(rec.diagnostics.len(), 10);
}

#[test]
fn records_embed_config_and_write_documented_columns() {
    let cfg = ExperimentConfig::from_toml_str(&format!(
        "{MINIMAL}\n[forcing]\nfx = \"3*sin(pi*x)*exp(-8*(1-y))\"\n"
    ))
    .unwrap();
    let rec = harness::cmd_solve(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::write_records(dir.path(), std::slice::from_ref(&rec)).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(format!("{}.csv", rec.label()))).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, harness::CSV_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 1 + 4);
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join(format!("{}.json", rec.label()))).unwrap(),
    )
    .unwrap();
    assert_eq!(json["config"]["scenario"], "tiny");
    assert_eq!(json["config"]["solver"]["eps"], 0.2);
    assert!(json["summary"]["final_energy"].as_f64().unwrap() > 0.0);
}

#[test]
fn sweep_results_follow_parameter_order() {
    let mut cfg = ExperimentConfig::from_toml_str(&format!(
        "{MINIMAL}\n[forcing]\nfx = \"20*sin(pi*x)*exp(-8*(1-y))\"\n"
    ))
    .unwrap();
    cfg.sweep.eps = vec![0.1, 0.4, 0.2];
    let serial = harness::cmd_sweep_eps(&cfg, 1).unwrap();
    let pooled = harness::cmd_sweep_eps(&cfg, 3).unwrap();
    let eps: Vec<f64> = pooled.records.iter().map(|r| r.parameters["eps"]).collect();
    assert_eq!(eps, vec![0.1, 0.4, 0.2]);
    for (a, b) in serial.records.iter().zip(&pooled.records) {
        assert_eq!(a.csv_string().unwrap(), b.csv_string().unwrap());
    }
}

#[test]
fn seeded_initial_noise_is_reproducible() {
    let text = format!("{MINIMAL}\n[initial]\nnoise = 1e-4\n");
    let mut a = ExperimentConfig::from_toml_str(&text).unwrap();
    let b = a.clone();
    let (ua, ub) = (a.resolve().unwrap().u0, b.resolve().unwrap().u0);
    assert_eq!(ua.to_flat(), ub.to_flat());
    assert!(ua.linf() > 0.0);
    a.seed = 9;
    assert_ne!(a.resolve().unwrap().u0.to_flat(), ub.to_flat());
    let r = a.resolve().unwrap();
    assert!(r.grid.divergence(&r.u0).max_abs() < 1e-12);
}

#[test]
fn s1_summary_matches_golden_record() {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("../../../scenarios/golden/s1_summary.json")).unwrap();
    let rec = harness::cmd_solve(&scenarios::builtin("S1").unwrap()).unwrap();
    let got = serde_json::to_value(&rec.summary).unwrap();
    for (key, want) in golden.as_object().unwrap() {
        let have = &got[key];
        match (want.as_f64(), have.as_f64()) {
            (Some(w), Some(h)) => assert!(
                (w - h).abs() <= 1e-9 * w.abs().max(1e-3),
                "{key}: {h} vs {w}"
            ),
            _ => assert_eq!(want, have, "{key}"),
        }
    }
}
