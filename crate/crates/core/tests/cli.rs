mod common;

use std::fs;

use serde_json::Value;
use tempfile::tempdir;
use transpca::appkit::io::{load_panel_csv, LoadOptions};
use transpca::estimate::{default_r_max, er_num_factors, PanelRole};
use transpca::simgen::Method;
use transpca::transfer::{panel_basis, source_bases, trans_ed, weighted_projection};

use common::{run, small_world, write_world};

fn json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempdir().unwrap();
    let out = run(dir.path(), &["estimate", "--target", "t.csv", "--bogus", "--out", "est.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("est.json").exists());
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_and_missing_subcommand() {
    let dir = tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempdir().unwrap();
    let out = run(dir.path(), &["estimate", "--target", "missing.csv", "--out", "est.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    assert!(!dir.path().join("est.json").exists());

    fs::write(dir.path().join("bad.csv"), "a,b\n1,2\n3,x\n").unwrap();
    let out = run(dir.path(), &["estimate", "--target", "bad.csv", "--out", "est.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempdir().unwrap();
    write_world(dir.path(), &small_world(1));
    let d = dir.path();
    assert_eq!(run(d, &["estimate", "--target", "target.csv", "--out", "est.txt"]).status.code(), Some(1));
    assert_eq!(run(d, &["estimate", "--target", "target.csv", "--r0", "zero", "--out", "e.json"]).status.code(), Some(1));
    assert_eq!(run(d, &["estimate", "--target", "target.csv", "--r0", "3", "--s", "4", "--out", "e.json"]).status.code(), Some(1));
    assert_eq!(run(d, &["select", "--target", "target.csv", "--out", "s.json"]).status.code(), Some(1));
    assert_eq!(
        run(d, &["backtest", "--target", "target.csv", "--r0", "3", "--window", "4", "--out", "b.csv"]).status.code(),
        Some(1)
    );
    fs::write(d.join("cfg.json"), r#"{"N": 30, "T0": 40, "bogus": 1}"#).unwrap();
    assert_eq!(run(d, &["simulate", "--config", "cfg.json", "--out", "s.csv"]).status.code(), Some(1));
    assert!(!d.join("s.csv").exists());
}

#[test]
fn estimate_auto_counts_dispatch_to_the_selectors() {
    let dir = tempdir().unwrap();
    let world = small_world(2);
    let src_paths = write_world(dir.path(), &world);
    let mut args = vec!["estimate", "--target", "target.csv", "--r0", "auto", "--s", "auto", "--sources"];
    let names: Vec<String> = src_paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    args.extend(names.iter().map(String::as_str));
    args.extend(["--out", "est.json"]);
    let out = run(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("est.json"));

    let target = load_panel_csv(&dir.path().join("target.csv"), PanelRole::Target, LoadOptions::default()).unwrap();
    let sources: Vec<_> = src_paths
        .iter()
        .map(|p| load_panel_csv(p, PanelRole::Source, LoadOptions::default()).unwrap())
        .collect();
    let r0 = er_num_factors(&target.covariance(), default_r_max(target.units(), target.periods())).unwrap();
    let r_k: Vec<usize> = sources
        .iter()
        .map(|s| er_num_factors(&s.covariance(), default_r_max(s.units(), s.periods())).unwrap())
        .collect();
    let bases = source_bases(&sources, &r_k).unwrap();
    let tb = panel_basis(&target, r0).unwrap();
    let wp = weighted_projection(std::iter::once(&tb).chain(bases.iter())).unwrap();
    let s_max = r_k.iter().copied().fold(r0, usize::min);
    let s = trans_ed(&wp, s_max).unwrap();

    assert_eq!(v["r0_rule"], "eigenvalue_ratio");
    assert_eq!(v["s_rule"], "trans_ed");
    assert_eq!(v["r0"], r0);
    assert_eq!(v["s"], s);
    let loadings = v["loadings"].as_array().unwrap();
    assert_eq!(loadings.len(), 30);
    assert_eq!(loadings[0].as_array().unwrap().len(), r0);
    assert_eq!(v["factors"].as_array().unwrap().len(), 60);
}

#[test]
fn estimate_without_sources_uses_the_strength_rule() {
    let dir = tempdir().unwrap();
    write_world(dir.path(), &small_world(3));
    let out = run(dir.path(), &["estimate", "--target", "target.csv", "--r0", "3", "--out", "est.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("est.json"));
    assert_eq!(v["r0_rule"], "given");
    assert_eq!(v["s_rule"], "strength_threshold");
    assert_eq!(v["target_strengths"].as_array().unwrap().len(), 3);
}

#[test]
fn simulate_header_matches_the_summary_schema() {
    let dir = tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"K": 4, "N": 20, "T0": 30, "Tk": [60], "scenario": "half_informative"}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["simulate", "--config", "cfg.json", "--reps", "2", "--seed", "3", "--out", "sim.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();

    let mut names: Vec<String> = Vec::new();
    for m in Method::ALL {
        names.push(format!("d_{}", m.name()));
    }
    for m in Method::ALL {
        names.push(format!("mse_{}", m.name()));
    }
    names.extend(["alpha_trans_1", "alpha_trans_2", "alpha_target_1", "alpha_target_2"].map(String::from));
    names.extend(
        ["s_hat", "s_exact", "s_under", "tpr", "tnr", "precision", "selection_exact", "tau", "similarity"]
            .map(String::from),
    );
    let mut expected = vec!["K".to_string(), "N".into(), "T0".into(), "Tk".into(), "reps".into()];
    for n in names {
        expected.push(format!("{n}_mean"));
        expected.push(format!("{n}_sd"));
    }
    assert_eq!(header, expected.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..5], &["4", "20", "30", "60", "2"]);
    assert!(lines.next().is_none());
}

#[test]
fn simulate_json_output_is_an_array_of_rows() {
    let dir = tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"[{"N": 20, "T0": 30, "methods": ["oracle"]}, {"N": 24, "T0": 30, "methods": ["target_only"]}]"#,
    )
    .unwrap();
    let out = run(dir.path(), &["simulate", "--config", "cfg.json", "--reps", "1", "--out", "sim.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("sim.json"));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["N"], 24);
}

#[test]
fn select_and_backtest_write_their_reports() {
    let dir = tempdir().unwrap();
    write_world(dir.path(), &small_world(4));
    let d = dir.path();
    let sources = ["source1.csv", "source2.csv", "source3.csv", "source4.csv"];

    let mut args = vec!["select", "--target", "target.csv", "--r0", "3", "--s", "2", "--rk", "4", "--folds", "5", "--sources"];
    args.extend(sources);
    args.extend(["--out", "sel.json"]);
    let out = run(d, &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&d.join("sel.json"));
    assert_eq!(v["selected"], serde_json::json!(["source1", "source2"]));
    assert_eq!(v["cross_validation"]["grid"].as_array().unwrap().len(), 21);

    let mut args = vec!["backtest", "--target", "target.csv", "--r0", "3", "--s", "2", "--rk", "4", "--window", "30", "--sources"];
    args.extend(sources);
    args.extend(["--out", "bt.csv"]);
    let out = run(d, &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.join("bt.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("t,label,portfolio_return,value,ridge,condition_number,w_1,"));
    assert!(lines.next().unwrap().starts_with(",start,,1,"));
    let mut count = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let sum: f64 = cells[6..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-10);
        count += 1;
    }
    assert_eq!(count, 30);
}
