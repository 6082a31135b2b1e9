use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mscos::supports::{build_grid_support, OverlapRow, Rect};
use mscos_cli::io;
use serde_json::json;

fn mscos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscos")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = mscos(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, v: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 4x4 partition grid; D1 = 2x2 blocks of four cells, D2 = the four rows,
/// Dc = two column halves (a target support).
fn write_toy(dir: &Path) {
    let fine = build_grid_support(4, 4, Rect::UNIT).unwrap();
    let d1 = build_grid_support(2, 2, Rect::UNIT).unwrap();
    let d2 = build_grid_support(4, 1, Rect::UNIT).unwrap();
    let dc = build_grid_support(1, 2, Rect::UNIT).unwrap();
    io::write_support(&dir.join("partition.json"), &fine).unwrap();
    io::write_support(&dir.join("d1.json"), &d1).unwrap();
    io::write_support(&dir.join("d2.json"), &d2).unwrap();
    io::write_support(&dir.join("dc.json"), &dc).unwrap();
    let mut o1 = Vec::new();
    let mut o2 = Vec::new();
    let mut oc = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let fine_id = format!("r{r}c{c}");
            let row = |coarse_id: String| OverlapRow { fine_id: fine_id.clone(), coarse_id, overlap_area: 1.0 / 16.0 };
            o1.push(row(format!("r{}c{}", r / 2, c / 2)));
            o2.push(row(format!("r{r}c0")));
            oc.push(row(format!("r0c{}", c / 2)));
        }
    }
    io::write_overlaps(&dir.join("overlap1.csv"), &o1).unwrap();
    io::write_overlaps(&dir.join("overlap2.csv"), &o2).unwrap();
    io::write_overlaps(&dir.join("overlapc.csv"), &oc).unwrap();
    let y1 = [Some(1.2), Some(0.4), None, Some(-0.8)];
    let y2 = [Some(3.1), Some(1.0), Some(-1.5), Some(-2.2)];
    io::write_values(&dir.join("y1.csv"), d1.ids(), &y1).unwrap();
    io::write_values(&dir.join("y2.csv"), d2.ids(), &y2).unwrap();
}

fn fit_config(dir: &Path, kind: &str, extra: serde_json::Value) -> PathBuf {
    let mut v = json!({
        "schema_version": 1,
        "model": {"kind": kind, "r": 3},
        "supports": {
            "partition": "partition.json",
            "d1": "d1.json", "d2": "d2.json",
            "overlap1": "overlap1.csv", "overlap2": "overlap2.csv"
        },
        "data": {"y1": "y1.csv", "y2": "y2.csv"},
        "mcmc": {"n_iter": 300, "burn_in": 100, "seed": 5},
        "draws_dir": "fit"
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    write_config(dir, &format!("{kind}.json"), v)
}

#[test]
fn missing_config_file_exits_2() {
    let out = mscos(&["simulate", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn no_subcommand_exits_2() {
    assert_eq!(mscos(&[]).status.code(), Some(2));
    assert_eq!(mscos(&["fit"]).status.code(), Some(2));
}

#[test]
fn bad_config_field_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", json!({"schema_version": 1, "scenario": {"n_datasets": "five"}}));
    let out = mscos(&["simulate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scenario.n_datasets"), "{err}");

    let cfg = write_config(dir.path(), "v.json", json!({"schema_version": 9}));
    assert_eq!(mscos(&["simulate", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn minimal_simulate_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        json!({"schema_version": 1, "scenario": {
            "n_datasets": 1, "truths": ["ms-sre"], "fits": ["ms-sre"], "r": 10,
            "mcmc": {"n_iter": 200, "burn_in": 50}
        }}),
    );
    let out = dir.path().join("out");
    run_ok(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["manifest.json", "runs.csv", "table.csv"]);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
}

#[test]
fn fit_dimension_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    // y1 keyed by D2 units: unknown ids for D1
    fs::copy(dir.path().join("y2.csv"), dir.path().join("y1.csv")).unwrap();
    let cfg = fit_config(dir.path(), "ms-sre", json!({}));
    let out = mscos(&["fit", "--config", s(&cfg), "--out", s(&dir.path().join("fit"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_two_chains_then_predict_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    let cfg = fit_config(d, "ms-sre", json!({}));
    let fit_dir = d.join("fit");
    run_ok(&["fit", "--config", s(&cfg), "--out", s(&fit_dir)]);
    assert!(fit_dir.join("draws_chain0.csv").exists());
    assert!(fit_dir.join("draws_chain1.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fit_dir.join("fit_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["chains"].as_array().unwrap().len(), 2);
    assert_ne!(manifest["chains"][0]["seed"], manifest["chains"][1]["seed"]);
    assert!(!manifest["gelman_rubin"].as_array().unwrap().is_empty());

    // identity target: one row per partition unit and variable
    let pred_dir = d.join("pred");
    run_ok(&["predict", "--config", s(&cfg), "--out", s(&pred_dir)]);
    let rows = io::read_predictions(&pred_dir.join("predictions.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 16);

    // latent means collapsed onto column halves equal the aggregated
    // partition-scale means
    let lat = fit_config(d, "ms-sre", json!({"latent_mean": true, "target": {"support": "dc.json", "overlap": "overlapc.csv"}}));
    let col_dir = d.join("pred_cols");
    run_ok(&["predict", "--config", s(&lat), "--out", s(&col_dir)]);
    let lat_id = fit_config(d, "ms-sre", json!({"latent_mean": true}));
    let id_dir = d.join("pred_id");
    run_ok(&["predict", "--config", s(&lat_id), "--out", s(&id_dir)]);
    let fine = io::read_predictions(&id_dir.join("predictions.csv")).unwrap();
    let cols = io::read_predictions(&col_dir.join("predictions.csv")).unwrap();
    assert_eq!(cols.len(), 4);
    for row in &cols {
        let half: usize = row.unit_id[3..].parse().unwrap();
        let expected: f64 = fine
            .iter()
            .filter(|f| f.variable == row.variable)
            .filter(|f| f.unit_id[3..].parse::<usize>().unwrap() / 2 == half)
            .map(|f| f.mean / 8.0)
            .sum();
        assert!((row.mean - expected).abs() < 1e-9, "{} {}: {} vs {expected}", row.unit_id, row.variable, row.mean);
    }

    // pred = truth gives rmse 0
    let mut truth = String::from("unit_id,value\n");
    for r in fine.iter().filter(|r| r.variable == "y1") {
        truth.push_str(&format!("{},{}\n", r.unit_id, r.mean));
    }
    fs::write(d.join("truth_y1.csv"), truth).unwrap();
    let ev = fit_config(
        d,
        "ms-sre",
        json!({"predictions": "pred_id/predictions.csv", "truth": {"y1": "truth_y1.csv"}}),
    );
    let ev_dir = d.join("eval");
    run_ok(&["evaluate", "--config", s(&ev), "--out", s(&ev_dir)]);
    let json_text = fs::read_to_string(ev_dir.join("metrics.json")).unwrap();
    let report = mscos::evaluate::MetricReport::from_json(&json_text).unwrap();
    assert_eq!(report.rmse.len(), 1);
    assert_eq!(report.rmse[0].value, 0.0);
    assert!(report.waic.iter().all(|w| w.waic.is_finite()));
    assert_eq!(report.waic.len(), 3);
    assert!(!report.gelman_rubin.is_empty());
    let csv_text = fs::read_to_string(ev_dir.join("metrics.csv")).unwrap();
    assert_eq!(mscos::evaluate::MetricReport::from_csv(&csv_text).unwrap(), report);
}

#[test]
fn evaluate_rmse_without_truth_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "e.json",
        json!({"schema_version": 1, "metrics": ["rmse"], "predictions": "p.csv"}),
    );
    let out = mscos(&["evaluate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.truth"));
}

#[test]
fn predict_without_draws_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let cfg = fit_config(dir.path(), "ms-sre", json!({"draws_dir": "nowhere"}));
    let out = mscos(&["predict", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_with_other_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    let cfg = fit_config(d, "ms-sre", json!({"mcmc": {"n_iter": 60, "burn_in": 10}}));
    run_ok(&["fit", "--config", s(&cfg), "--out", s(&d.join("fit"))]);
    let other = fit_config(d, "ms-oh", json!({}));
    assert_eq!(mscos(&["predict", "--config", s(&other), "--out", s(d)]).status.code(), Some(2));
    // a hand-edited draws file with a missing column
    let draws = d.join("fit/draws_chain0.csv");
    let text = fs::read_to_string(&draws).unwrap();
    let cut: String = text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n").collect();
    fs::write(&draws, cut).unwrap();
    assert_eq!(mscos(&["predict", "--config", s(&cfg), "--out", s(d)]).status.code(), Some(2));
}

#[test]
fn univariate_fit_ignores_second_variable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    fs::remove_file(d.join("y2.csv")).unwrap();
    let cfg = fit_config(
        d,
        "ms-oh",
        json!({"model": {"kind": "ms-oh", "r": 3, "arity": {"univariate": "first"}}, "mcmc": {"n_iter": 100, "burn_in": 20}}),
    );
    run_ok(&["fit", "--config", s(&cfg), "--out", s(&d.join("fit"))]);
    let header = fs::read_to_string(d.join("fit/draws_chain0.csv")).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("draw,beta1,sigma2_1,sigma2_eta,phi,"), "{header}");
    run_ok(&["predict", "--config", s(&cfg), "--out", s(&d.join("pred"))]);
    let rows = io::read_predictions(&d.join("pred/predictions.csv")).unwrap();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.variable == "y1"));
}

#[test]
fn mcar_fit_completes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    let cfg = fit_config(d, "ms-mcar", json!({"mcmc": {"n_iter": 100, "burn_in": 20}}));
    run_ok(&["fit", "--config", s(&cfg), "--out", s(&d.join("fit")), "--threads", "2"]);
    let header = fs::read_to_string(d.join("fit/draws_chain0.csv")).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains("nu2,rho,tau,process_0"), "{header}");
    assert!(header.ends_with("process_31"), "{header}");
}
