use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mpbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpbe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn pipeline_case6(out: &Path) -> Output {
    mpbe(&[
        "pipeline",
        "--case",
        "6",
        "--bootstraps",
        "5",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn pipeline_is_deterministic_and_recovers_case6() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = pipeline_case6(&a);
    assert!(ra.status.success(), "{}", String::from_utf8_lossy(&ra.stderr));
    assert!(pipeline_case6(&b).status.success());
    let report = "identify/model_report.json";
    assert_eq!(fs::read(a.join(report)).unwrap(), fs::read(b.join(report)).unwrap());
    let r = json(&a.join(report));
    assert_eq!(r["success_rate"], 100.0);
    let terms = r["terms"].as_array().unwrap();
    assert_eq!(terms.len(), 2);
    assert!((terms[0]["coefficient"].as_f64().unwrap() - 1.0).abs() < 0.05);
    assert!((terms[1]["coefficient"].as_f64().unwrap() + 0.25).abs() < 0.05);
    let hash = r["config_hash"].as_str().unwrap().to_string();
    for dir in ["data", "dmd", "library", "identify"] {
        let m = json(&a.join(dir).join("manifest.json"));
        assert_eq!(m["config_hash"], hash.as_str(), "{dir}");
    }
    let moments = fs::read_to_string(a.join("data/moments.csv")).unwrap();
    assert!(moments.starts_with(&format!("# config_hash={hash}\nt,M00,M10,M01,M11\n")));
    assert!(a.join("identify/ensemble_lambda_0p1.csv").exists());
    assert_eq!(json(&a.join("summary.json"))["library_size"], 2);
}

#[test]
fn empty_lambda_grid_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("c.toml");
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/case1.toml"))
        .unwrap()
        .replace(
            "lambda_grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]",
            "lambda_grid = []",
        );
    assert!(text.contains("lambda_grid = []"));
    fs::write(&cfg, text).unwrap();
    let o = mpbe(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_grid"));
    assert!(!out.exists());
}

#[test]
fn no_model_exits_nonzero_after_writing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mpbe(&[
        "pipeline",
        "--case",
        "6",
        "--aggregate",
        "none",
        "--lambda-grid",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no model"));
    assert!(out.join("identify/candidates.csv").exists());
    assert!(!out.join("identify/model_report.json").exists());
}

#[test]
fn evaluate_checks_grid_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(pipeline_case6(&run).status.success());
    let fresh = tmp.path().join("fresh");
    let g = mpbe(&[
        "generate",
        "--case",
        "6",
        "--noise",
        "0.01",
        "--seed",
        "9",
        "--out",
        fresh.to_str().unwrap(),
    ]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let report = run.join("identify/model_report.json");
    let terms = run.join("library/terms.json");
    let eval_dir = tmp.path().join("eval");
    let o = mpbe(&[
        "evaluate",
        "--report",
        report.to_str().unwrap(),
        "--terms",
        terms.to_str().unwrap(),
        "--data",
        fresh.join("data").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ev = json(&eval_dir.join("evaluation.json"));
    assert_eq!(ev["success_rate"], 100.0);
    assert_eq!(ev["truth_in_library"], true);

    let other = tmp.path().join("other");
    assert!(mpbe(&[
        "generate",
        "--case",
        "1",
        "--timepoints",
        "4",
        "--out",
        other.to_str().unwrap()
    ])
    .status
    .success());
    let o = mpbe(&[
        "evaluate",
        "--report",
        report.to_str().unwrap(),
        "--terms",
        terms.to_str().unwrap(),
        "--data",
        other.join("data").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid hash mismatch"));
}

#[test]
fn dmd_report_flags_case5_semi_continuous() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mpbe(&["dmd-report", "--case", "5", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("dmd");
    for f in [
        "mode_0.csv",
        "eigenvalues.csv",
        "traces.csv",
        "diagnostics.json",
        "dmd_advice.json",
        "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let advice = json(&dir.join("dmd_advice.json"));
    assert_eq!(advice["continuity"], "semi-continuous-candidate");
    assert_eq!(advice["rate"], "dependent");
}

#[test]
fn identify_accepts_advice_override() {
    let tmp = tempfile::tempdir().unwrap();
    let advice = tmp.path().join("advice.json");
    fs::write(
        &advice,
        r#"{"rate": "independent", "continuity": "product-delta-candidate", "radii_dispersion": 0.0,
            "edge_energy_fraction": 0.0, "log_diagonal_energy_fraction": 1.0,
            "dispersion_threshold": 0.05, "dominance": 0.5}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = mpbe(&[
        "identify",
        "--case",
        "6",
        "--aggregate",
        "none",
        "--advice",
        advice.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("dmd").exists());
    let terms: Value = json(&out.join("library/terms.json"));
    assert_eq!(terms.as_array().unwrap().len(), 2);
}

#[test]
fn example_config_is_the_default() {
    let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/case1.toml"));
    let cfg = mpbe_cli::config::PipelineConfig::load(path).unwrap();
    assert_eq!(cfg, mpbe_cli::config::PipelineConfig::default());
}
