use std::path::Path;
use std::process::Command;

use leakrb::analysis::*;
use leakrb::dataset::*;
use leakrb::fit::Regime;
use leakrb::noise::{LeakAssignment, NoiseModel};
use leakrb::simulate::*;
use serde_json::Value;

const MINIMAL: &str = r#"{
  "schema": "leakrb/dataset/v1",
  "metadata": {"d_c": 4, "system": "bench", "operator": "someone"},
  "circuits": [
    {"length": 1, "sequence_id": 0, "counts": {"00": 97, "01": 3}, "shots": 100, "note": "kept"}
  ]
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_leakrb"))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn sim_dataset(protocol: Protocol, lengths: Vec<usize>, nm: NoiseModel, n_seq: usize, seed: u64) -> RBDataset {
    let mut cfg = RBProtocolConfig::new(protocol, lengths, nm, seed);
    cfg.n_sequences = n_seq;
    run_protocol(&cfg).unwrap()
}

#[test]
fn minimal_dataset_ingests_and_keeps_unknown_fields() {
    let ds = RBDataset::from_json_str(MINIMAL).unwrap();
    assert_eq!(ds.circuits.len(), 1);
    assert_eq!(ds.metadata.extra["operator"], "someone");
    assert_eq!(ds.circuits[0].extra["note"], "kept");
    let again = RBDataset::from_json_str(&ds.to_json_string().unwrap()).unwrap();
    assert_eq!(again, ds);
}

#[test]
fn schema_errors_are_specific() {
    let bad_schema = MINIMAL.replace("leakrb/dataset/v1", "other/v9");
    assert!(matches!(RBDataset::from_json_str(&bad_schema), Err(leakrb::Error::Schema { .. })));
    let bad_sum = MINIMAL.replace("\"shots\": 100", "\"shots\": 99");
    match RBDataset::from_json_str(&bad_sum) {
        Err(leakrb::Error::Schema { path, .. }) => assert_eq!(path, "circuits[0].counts"),
        other => panic!("{other:?}"),
    }
    let negative = MINIMAL.replace("\"01\": 3", "\"01\": -3");
    match RBDataset::from_json_str(&negative) {
        Err(leakrb::Error::Schema { path, .. }) => assert!(path.starts_with("line ")),
        other => panic!("{other:?}"),
    }
    let zero_len = MINIMAL.replace("\"length\": 1", "\"length\": 0");
    assert!(RBDataset::from_json_str(&zero_len).is_err());
    assert!(RBDataset::from_json_str("{").is_err());
}

#[test]
fn missing_gadget_data_fails_at_plan_validation() {
    let ds = RBDataset::from_json_str(MINIMAL).unwrap();
    let plan = AnalysisPlan::new(Protocol::Lps, Regime::Short);
    match analyze(&ds, &plan) {
        Err(leakrb::Error::Plan(msg)) => assert!(msg.contains("gadget"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut plan = AnalysisPlan::new(Protocol::CompSpam, Regime::Short);
    plan.post_select = true;
    assert!(matches!(analyze(&ds, &plan), Err(leakrb::Error::Plan(_))));
}

#[test]
fn simulated_datasets_roundtrip_byte_identically() {
    let ds = sim_dataset(Protocol::Lps, vec![1, 4, 9], NoiseModel::simulation_default(2e-3, 1e-3, true), 5, 3);
    let text = ds.to_json_string().unwrap();
    let back = RBDataset::from_json_str(&text).unwrap();
    assert_eq!(back.to_json_string().unwrap(), text);
}

#[test]
fn cli_simulate_analyze_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds.json");
    let st = bin()
        .args(["simulate", "--protocol", "comp-spam", "--regime", "no-seepage", "--lambda", "1e-3", "--tau", "1e-3"])
        .args(["--auto-lengths", "--seed", "7", "--sequences", "8", "--shots", "50", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let v = read_json(&data);
    assert_eq!(v["schema"], DATASET_SCHEMA);
    assert_eq!(v["provenance"]["seed"], 7);
    assert!(v["provenance"]["config_hash"].as_str().unwrap().len() >= 16);
    assert!(v["provenance"]["version"].is_string());
    let ds = ingest(&data).unwrap();
    assert_eq!(ds.lengths(), vec![1, 4, 16, 63, 251, 1000]);

    let mut plan = AnalysisPlan::new(Protocol::CompSpam, Regime::NoSeepage);
    plan.bootstrap_resamples = 100;
    plan.seed = 9;
    let plan_path = dir.path().join("plan.json");
    std::fs::write(&plan_path, serde_json::to_string(&plan).unwrap()).unwrap();
    let out = dir.path().join("report.json");
    let st = bin().arg("analyze").arg("--data").arg(&data).arg("--plan").arg(&plan_path).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let file = read_json(&out);
    assert_eq!(file["schema"], REPORT_SCHEMA);
    assert_eq!(file["provenance"]["seed"], 9);
    let in_process = analyze(&ds, &plan).unwrap();
    let rounded: Value = serde_json::from_str(&leakrb::io::to_json_rounded(&in_process).unwrap()).unwrap();
    for (k, v) in rounded.as_object().unwrap() {
        assert_eq!(&file[k], v, "{k}");
    }
}

#[test]
fn cli_fit_sweep_audit_and_gateset_audit() {
    let dir = tempfile::tempdir().unwrap();
    let curve = DecayCurve {
        estimator: Estimator::PComp,
        points: [1usize, 3, 10, 30, 100, 300]
            .iter()
            .map(|&l| CurvePoint {
                length: l,
                value: leakrb::fit::ModelKind::DoubleExponential.predict(&[4e-3, 1e-3], l as f64, 4),
                stderr: 1e-3,
                n_sequences: 30,
            })
            .collect(),
        d_c: 4,
    };
    let cpath = dir.path().join("curve.json");
    std::fs::write(&cpath, serde_json::to_string(&curve).unwrap()).unwrap();
    let fout = dir.path().join("fit.json");
    let st = bin().arg("fit").arg("--in").arg(&cpath).args(["--model", "double-exponential", "--out"]).arg(&fout).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let f = read_json(&fout);
    assert_eq!(f["schema"], "leakrb/fit/v1");
    assert!((f["fit"]["params"][0].as_f64().unwrap() - 4e-3).abs() < 1e-6);
    assert!(f["provenance"].is_object());

    let spec = serde_json::json!({
        "schema": "leakrb/sweep-spec/v1", "regime": "no-seepage", "mode": "exact",
        "protocols": ["comp-spam", "avg-mb"], "lambda_grid": [1e-3, 3e-3], "tau_grid": [1e-3, 2e-3, 4e-3]
    });
    let spath = dir.path().join("spec.json");
    std::fs::write(&spath, spec.to_string()).unwrap();
    let (csv, js) = (dir.path().join("s.csv"), dir.path().join("s.json"));
    let st = bin().arg("sweep").arg("--spec").arg(&spath).arg("--out-csv").arg(&csv).arg("--out-json").arg(&js).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 3 * 3);
    assert_eq!(read_json(&js)["schema"], "leakrb/sweep-result/v1");

    let aout = dir.path().join("audit.json");
    let st = bin().args(["audit", "--lambda", "0", "--tau", "0", "--delta-pi", "1e-3", "--out"]).arg(&aout).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let a = read_json(&aout);
    let ratio = a["halving_ratio"].as_f64().unwrap();
    assert!((0.3..=0.7).contains(&ratio));

    let gout = dir.path().join("g.json");
    let st = bin().args(["gateset-audit", "--gateset", "trapped-ion", "--out"]).arg(&gout).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let g = read_json(&gout);
    assert_eq!(g["bins"], 24);
    assert_eq!(g["histograms"][0]["probabilities"].as_array().unwrap().len(), 24);
    assert!(g["histograms"][1]["tvd_from_uniform"].as_f64().unwrap() < 0.15);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    assert_eq!(leakrb::cli::run(["leakrb", "simulate", "--bogus"]), 2);
    assert_eq!(leakrb::cli::run(["leakrb"]), 2);
    let o = out.to_str().unwrap();
    assert_eq!(leakrb::cli::run(["leakrb", "simulate", "--protocol", "lps", "--lambda", "2", "--tau", "0", "--lengths", "1", "--out", o]), 2);
    assert_eq!(leakrb::cli::run(["leakrb", "gateset-audit", "--gateset", "no-such-gateset", "--out", o]), 2);
    assert!(!out.exists());
    assert_eq!(leakrb::cli::run(["leakrb", "simulate", "--protocol", "lps", "--lambda", "1e-3", "--tau", "0", "--lengths", "1,2", "--sequences", "2", "--shots", "5", "--out", o]), 0);
    assert!(out.exists());
    let st = bin().args(["fit", "--in", "/nonexistent/file.json", "--model", "linear"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(!st.stderr.is_empty());

    // A flat curve leaves nothing to fit in the double exponential.
    let flat = DecayCurve {
        estimator: Estimator::PComp,
        points: vec![CurvePoint { length: 1, value: f64::NAN, stderr: 0.0, n_sequences: 1 }; 4],
        d_c: 4,
    };
    let mut v = serde_json::to_value(&flat).unwrap();
    for (i, p) in v["points"].as_array_mut().unwrap().iter_mut().enumerate() {
        p["length"] = (i + 1).into();
        p["value"] = 0.5.into();
    }
    let cpath = dir.path().join("flat.json");
    std::fs::write(&cpath, v.to_string()).unwrap();
    let code = leakrb::cli::run(["leakrb", "fit", "--in", cpath.to_str().unwrap(), "--model", "linear", "--out", o]);
    assert_eq!(code, 0);
}

#[test]
fn naive_plan_misses_leakage() {
    let l = leakrb::space::build_layout(2).unwrap();
    let mut nm = NoiseModel::new(0.0, 1e-3, false);
    nm.leak_readout_assignment = LeakAssignment::all_to("00", &l);
    let truth = leakrb::experiment::channel_truth(&nm, &l).unwrap();
    let ds = sim_dataset(Protocol::Naive, vec![1, 9, 17, 24, 32, 40], nm, 20, 2);
    let mut plan = AnalysisPlan::new(Protocol::Naive, Regime::Short);
    plan.bootstrap_resamples = 0;
    let a = analyze(&ds, &plan).unwrap();
    assert!(a.report.infidelity.unwrap().value < 1e-4);
    assert!((truth.infidelity - 1e-3).abs() < 1e-5);
    assert!(a.report.flags.iter().any(|f| f.contains("leakage ignored")));
}

#[test]
fn h_series_like_avg_mb_reanalysis() {
    let (lam, tau) = (1.1e-3, 3e-4);
    let nm = NoiseModel::simulation_default(lam, tau, true);
    let truth = leakrb::experiment::channel_truth(&nm, &leakrb::space::build_layout(2).unwrap()).unwrap();
    let lengths = leakrb::experiment::sequence_lengths(Regime::CompDominant, Protocol::AvgMb, lam, tau).unwrap();
    let ds = sim_dataset(Protocol::AvgMb, lengths, nm, 30, 31);
    let mut plan = AnalysisPlan::new(Protocol::AvgMb, Regime::CompDominant);
    plan.retention_for_ic = true;
    plan.truncation.guard = true;
    plan.bootstrap_resamples = 100;
    plan.seed = 1;
    let a = analyze(&ds, &plan).unwrap();
    let inf = a.report.infidelity.unwrap();
    let ci = inf.ci.unwrap();
    assert!(ci > 1e-5 && ci < 1e-3, "ci {ci}");
    assert!((inf.value - truth.infidelity).abs() < 3.0 * ci, "{} ± {ci} vs {}", inf.value, truth.infidelity);
}
