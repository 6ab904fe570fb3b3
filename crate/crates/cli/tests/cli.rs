//! End-to-end checks of the command-line interface: exit codes, report
//! shape, determinism, and the external file formats.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_knn-agg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        !out.stdout.is_empty(),
        "no stdout; stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is valid JSON")
}

fn strip_timestamp(v: &mut serde_json::Value) {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
}

#[test]
fn gen_data_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = run(&["gen-data", "--kind", "uniform:60", "--seed", "5", "--out", p.to_str().unwrap()]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.csv");
    let out = run(&["gen-data", "--kind", "uniform:60", "--seed", "6", "--out", c.to_str().unwrap()]);
    assert!(out.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn estimate_report_reconciles_and_repeats_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.csv");
    assert!(run(&["gen-data", "--kind", "uniform:80", "--seed", "2", "--out", ds.to_str().unwrap()])
        .status
        .success());
    let args = [
        "estimate",
        "--dataset",
        ds.to_str().unwrap(),
        "--samples",
        "30",
        "--seed",
        "11",
        "--ground-truth",
    ];
    let out1 = run(&args);
    assert!(out1.status.success());
    let mut r1 = stdout_json(&out1);
    // Ledger reconciliation: the estimate's query count equals the oracle
    // ledger total.
    assert_eq!(
        r1["estimate"]["queries"].as_u64().unwrap(),
        r1["ledger"]["issued"].as_u64().unwrap()
    );
    let led = &r1["ledger"];
    assert_eq!(
        led["issued"].as_u64().unwrap(),
        led["init"].as_u64().unwrap()
            + led["vertex_test"].as_u64().unwrap()
            + led["binary_search"].as_u64().unwrap()
            + led["mc_trial"].as_u64().unwrap()
    );
    assert!(r1["ground_truth"]["value"].as_f64().unwrap() == 80.0);
    assert!(r1["ground_truth"]["relative_error"].as_f64().unwrap() < 0.5);
    // Same seed, same config: byte-identical modulo the timestamp field.
    let out2 = run(&args);
    let mut r2 = stdout_json(&out2);
    strip_timestamp(&mut r1);
    strip_timestamp(&mut r2);
    assert_eq!(r1, r2);
}

#[test]
fn sum_of_unit_weights_equals_count() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("unit.csv");
    let mut csv = String::from("id,x,y,w\n");
    let mut state = 12345u64;
    for i in 0..40 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let x = (state >> 11) as f64 / (1u64 << 53) as f64;
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let y = (state >> 11) as f64 / (1u64 << 53) as f64;
        csv.push_str(&format!("{i},{x},{y},1\n"));
    }
    std::fs::write(&ds, csv).unwrap();
    let base = [
        "--dataset",
        ds.to_str().unwrap(),
        "--region",
        "0,0,1,1",
        "--samples",
        "25",
        "--seed",
        "4",
    ];
    let count = stdout_json(&run(&[&["estimate", "--agg", "count"], &base[..]].concat()));
    let sum = stdout_json(&run(&[&["estimate", "--agg", "sum:w"], &base[..]].concat()));
    let cv = count["estimate"]["value"].as_f64().unwrap();
    let sv = sum["estimate"]["value"].as_f64().unwrap();
    assert!(((cv - sv) / cv).abs() < 1e-9, "count {cv} vs unit-weight sum {sv}");
}

#[test]
fn zero_budget_is_a_config_error() {
    let out = run(&["estimate", "--generate", "uniform:30", "--budget", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "zorp=1\n").unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exhausted_budget_exits_partial() {
    let out = run(&[
        "estimate",
        "--generate",
        "uniform:100",
        "--samples",
        "100000",
        "--budget",
        "300",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["estimate"]["partial"], serde_json::Value::Bool(true));
    assert!(r["ledger"]["issued"].as_u64().unwrap() <= 300);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "generate=uniform:50\nsamples=10\nseed=9\nagg=count\n# comment line\nmc=off\n",
    )
    .unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--samples", "15"]);
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert_eq!(r["config"]["samples"].as_u64(), Some(15)); // flag wins
    assert_eq!(r["config"]["mc"], serde_json::Value::Bool(false));
    assert_eq!(r["estimate"]["samples"].as_u64(), Some(15));
}

#[test]
fn verify_cell_matches_ground_truth() {
    let out = run(&[
        "verify-cell",
        "--generate",
        "uniform:50",
        "--seed",
        "3",
        "--tuple-id",
        "all",
        "--h",
        "1",
    ]);
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert_eq!(r["tuples_checked"].as_u64(), Some(50));
    assert_eq!(r["all_within_tolerance"], serde_json::Value::Bool(true));
    assert!(r["max_vertex_deviation"].as_f64().unwrap() <= 1e-9);
    assert!(r["max_area_rel_error"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn verify_cell_lnr_reports_corollary_ratio() {
    let out = run(&[
        "verify-cell",
        "--generate",
        "uniform:25",
        "--mode",
        "lnr",
        "--seed",
        "5",
        "--epsilon-frac",
        "0.001",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["all_within_tolerance"], serde_json::Value::Bool(true));
    for cell in r["cells"].as_array().unwrap() {
        let ratio = cell["volume_ratio"].as_f64().unwrap();
        let bound = cell["corollary_lower_bound"].as_f64().unwrap();
        assert!(ratio >= bound - 1e-9);
        assert!(ratio <= 1.0 + 0.05, "ratio {ratio} too far above 1");
    }
}

#[test]
fn locate_reports_quantiles_and_two_searches() {
    let out = run(&[
        "locate",
        "--generate",
        "uniform:40",
        "--mode",
        "lnr",
        "--seed",
        "8",
        "--count",
        "12",
        "--epsilon-frac",
        "0.0001",
        "--near",
        "0.5,0.5,0.3",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert!(r["localized"].as_u64().unwrap() >= 8);
    assert!(r["median_error"].as_f64().unwrap() <= 5.0 * 1e-4);
    assert!((r["mean_extra_searches"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    let near = &r["near_feature"];
    assert!(near["inferred_within"].as_u64().is_some());
}

#[test]
fn locate_requires_lnr_mode() {
    let out = run(&["locate", "--generate", "uniform:30", "--mode", "lr"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_emits_stable_appendable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let args = [
        "benchmark",
        "--generate",
        "clusters:120:3:0.06",
        "--n-sweep",
        "120",
        "--k-sweep",
        "1",
        "--runs",
        "2",
        "--samples",
        "8",
        "--seed",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "variant,n,k,runs,budget,samples_mean,queries_mean,rel_error_mean,sample_variance_mean,discarded_mean"
    );
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 5, "expected ablation rows, got {rows:?}");
    assert!(rows.iter().any(|r| r.starts_with("lr-agg-0,")));
    assert!(rows.iter().any(|r| r.starts_with("lr-agg-4:+weighted,")));
    // Append mode: one header, doubled rows.
    let out = bin().args(args).arg("--append").output().unwrap();
    assert!(out.status.success());
    let text2 = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text2.matches("variant,n,k").count(), 1);
    assert_eq!(text2.lines().count(), 1 + rows.len() * 2);
}

#[test]
fn density_file_round_trips_through_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.csv");
    let dens = dir.path().join("density.csv");
    assert!(run(&[
        "gen-data",
        "--kind",
        "clusters:100:3:0.05",
        "--seed",
        "4",
        "--out",
        ds.to_str().unwrap(),
        "--density-out",
        dens.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(Path::new(&dens).exists());
    let out = run(&[
        "estimate",
        "--dataset",
        ds.to_str().unwrap(),
        "--region",
        "0,0,1,1",
        "--density",
        dens.to_str().unwrap(),
        "--samples",
        "20",
        "--seed",
        "2",
        "--ground-truth",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert!(r["ground_truth"]["relative_error"].as_f64().unwrap() < 1.0);
}
