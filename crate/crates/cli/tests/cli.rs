use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn potts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_potts"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Writes `config` into a fresh directory and runs `sub` with output in `<dir>/out`.
fn run(sub: &str, config: &str) -> (TempDir, Output) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let output = potts(&[sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (dir, output)
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "exit {:?}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn out(dir: &TempDir) -> PathBuf {
    dir.path().join("out")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_curie_weiss_entries() {
    let (dir, output) = run("generate", r#"{"model": {"family": "curie_weiss", "n": 8}}"#);
    ok(&output);
    let text = fs::read_to_string(out(&dir).join("coupling.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("8,"));
    for (i, line) in lines.enumerate() {
        for (j, v) in line.split(',').enumerate() {
            if i != j {
                assert_eq!(v.parse::<f64>().unwrap(), 0.125, "entry ({i}, {j})");
            }
        }
    }
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("k=1"), "{stdout}");
}

#[test]
fn generate_hopfield_is_deterministic() {
    let config = r#"{"model": {"family": "hopfield", "n": 256, "d": 5}, "seed": 7}"#;
    let (a, oa) = run("generate", config);
    let (b, ob) = run("generate", config);
    ok(&oa);
    ok(&ob);
    let fa = fs::read(out(&a).join("coupling.csv")).unwrap();
    let fb = fs::read(out(&b).join("coupling.csv")).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn generate_sk_reports_spectrum() {
    let (_dir, output) = run("generate", r#"{"model": {"family": "sk", "n": 128}, "seed": 3}"#);
    ok(&output);
    let stdout = String::from_utf8(output.stdout).unwrap();
    let lambda_max: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("lambda_max "))
        .expect("lambda_max printed")
        .parse()
        .unwrap();
    // Semicircle edge, printed for inspection only.
    eprintln!("sk n=128 lambda_max = {lambda_max}");
    assert!(lambda_max.is_finite() && lambda_max > 0.0);
}

#[test]
fn generate_from_file_roundtrips() {
    let (dir, output) = run("generate", r#"{"model": {"family": "sk", "n": 16}, "seed": 2}"#);
    ok(&output);
    let first = fs::read(out(&dir).join("coupling.csv")).unwrap();
    let cfg = dir.path().join("file.json");
    fs::write(&cfg, r#"{"model": {"family": "file", "path": "out/coupling.csv"}}"#).unwrap();
    let again = dir.path().join("again");
    ok(&potts(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(again.join("coupling.csv")).unwrap(), first);
}

const SMALL_SAMPLE: &str = r#"{"model": {"family": "lattice2d", "side": 3}, "betas": [0.3, 0.44], "q": 2,
    "sampler": {"kind": "ag_gibbs", "m": 10, "burn_in": 1, "chains": 2}, "seed": 5}"#;

#[test]
fn sample_writes_expected_files() {
    let (dir, output) = run("sample", SMALL_SAMPLE);
    ok(&output);
    let o = out(&dir);
    for beta in ["0.3", "0.44"] {
        for c in 0..2 {
            let csv = o.join(format!("traces/ag_gibbs_beta{beta}_chain{c}.csv"));
            let rows = csv_rows(&csv);
            assert_eq!(rows.len(), 9);
            assert_eq!(rows[0][0], "2");
            assert_eq!(rows[8][0], "10");
            assert!(rows.iter().all(|r| r.len() == 11));
            let meta = read_json(&csv.with_extension("json"));
            assert_eq!(meta["stream_id"], c);
            assert_eq!(meta["master_seed"], 5);
        }
        let report = read_json(&o.join(format!("diagnostics/ag_gibbs_beta{beta}.json")));
        assert_eq!(report["chains"], 2);
        assert_eq!(report["draws_per_chain"], 9);
    }
    let bench = csv_rows(&o.join("benchmark.csv"));
    assert_eq!(bench.len(), 2);
    let resolved = read_json(&o.join("resolved_config.json"));
    assert_eq!(resolved["epsilon"], 1e-10);
    assert_eq!(resolved["bond_convention"], "indicator");
    assert_eq!(resolved["init"], "random");
    assert_eq!(resolved["model"]["scale"], "none");
}

fn strip_timing(mut v: Value) -> Value {
    for key in [
        "seconds_sampling",
        "seconds_precompute",
        "ess_per_sec",
        "ess_per_sec_incl_precompute",
    ] {
        v.as_object_mut().unwrap().remove(key);
    }
    v
}

fn file_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn sample_is_reproducible() {
    let config = r#"{"model": {"family": "curie_weiss", "n": 10}, "betas": [0.8], "q": 3,
        "sampler": {"kind": "swendsen_wang", "m": 300, "burn_in": 30, "chains": 3}, "seed": 11}"#;
    let (a, oa) = run("sample", config);
    let (b, ob) = run("sample", config);
    ok(&oa);
    ok(&ob);
    let (ta, tb) = (out(&a).join("traces"), out(&b).join("traces"));
    let names = file_names(&ta);
    assert_eq!(names, file_names(&tb));
    for name in names.iter().filter(|n| n.ends_with(".csv")) {
        assert_eq!(
            fs::read(ta.join(name)).unwrap(),
            fs::read(tb.join(name)).unwrap(),
            "{name}"
        );
    }
    let report = "diagnostics/swendsen_wang_beta0.8.json";
    let ra = strip_timing(read_json(&out(&a).join(report)));
    let rb = strip_timing(read_json(&out(&b).join(report)));
    assert_eq!(ra, rb);
    assert!(ra["ess"].as_f64().unwrap() > 0.0);
}

#[test]
fn thread_count_does_not_change_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, SMALL_SAMPLE).unwrap();
    let mut traces = Vec::new();
    for threads in ["1", "3"] {
        let o = dir.path().join(format!("t{threads}"));
        let output = Command::new(env!("CARGO_BIN_EXE_potts"))
            .args([
                "sample",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                o.to_str().unwrap(),
            ])
            .env("POTTS_THREADS", threads)
            .output()
            .unwrap();
        ok(&output);
        traces.push(fs::read(o.join("traces/ag_gibbs_beta0.44_chain1.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn incompatible_samplers_exit_3() {
    let (dir, output) = run(
        "sample",
        r#"{"model": {"family": "sk", "n": 10}, "betas": [1.0], "q": 2,
            "sampler": {"kind": "wolff", "m": 10, "burn_in": 1}}"#,
    );
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("non-negative"));
    assert!(!out(&dir).join("traces").exists());

    let (_dir, output) = run(
        "sample",
        r#"{"model": {"family": "curie_weiss", "n": 10}, "betas": [1.0], "q": 3,
            "sampler": {"kind": "ising_ag", "m": 10, "burn_in": 1}}"#,
    );
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("q = 2"));
}

#[test]
fn bad_config_exits_2_with_field_path() {
    let (_dir, output) = run(
        "sample",
        r#"{"model": {"family": "curie_weiss", "n": 10}, "betas": [1.0],
            "sampler": {"kind": "ag_gibbs", "m": "many", "burn_in": 1}}"#,
    );
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("sampler.m"), "{stderr}");

    let (_dir, output) = run(
        "sample",
        r#"{"model": {"family": "curie_weiss", "n": 10}, "betas": [-1.0]}"#,
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("betas[0]"));

    let (_dir, output) = run("generate", r#"{"model": {"family": "file", "path": "missing.csv"}}"#);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("model.path"));

    let output = potts(&["generate", "--config", "/nonexistent/config.json"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unconverged_rows_are_flagged() {
    // Short heat-bath chains on an ordered lattice are still coarsening.
    let (dir, output) = run(
        "sample",
        r#"{"model": {"family": "lattice2d", "side": 16}, "betas": [1.5], "q": 2,
            "sampler": {"kind": "heat_bath", "m": 100, "burn_in": 10, "chains": 4}, "seed": 2}"#,
    );
    ok(&output);
    let report = read_json(&out(&dir).join("diagnostics/heat_bath_beta1.5.json"));
    assert!(report["rhat"].as_f64().unwrap() > 1.2);
    assert!(report["status"].as_str().unwrap().contains("rhat"));
    let row = &csv_rows(&out(&dir).join("benchmark.csv"))[0];
    assert!(row[13].starts_with("warning"), "{row:?}");
    assert!(String::from_utf8_lossy(&output.stderr).contains("warning"));
}

fn oracle_entries(config: &str) -> Vec<Value> {
    let (dir, output) = run("oracle", config);
    ok(&output);
    read_json(&out(&dir).join("oracle.json")).as_array().unwrap().clone()
}

#[test]
fn oracle_zero_coupling() {
    let zeros = vec![vec![0.0; 5]; 5];
    let config = format!(
        r#"{{"model": {{"family": "custom", "entries": {}}}, "betas": [1.3], "q": 3}}"#,
        serde_json::to_string(&zeros).unwrap()
    );
    let entries = oracle_entries(&config);
    let log_z = entries[0]["log_partition"].as_f64().unwrap();
    assert!((log_z - 5.0 * 3f64.ln()).abs() < 1e-12, "{log_z}");
}

#[test]
fn oracle_single_edge() {
    let entries = oracle_entries(
        r#"{"model": {"family": "custom", "entries": [[0, 1], [1, 0]]}, "betas": [0.6], "q": 2,
            "oracle": {"want_pmf": true}}"#,
    );
    let log_z = entries[0]["log_partition"].as_f64().unwrap();
    let expected = (2.0 * 0.6f64.exp() + 2.0).ln();
    assert!((log_z - expected).abs() < 1e-12, "{log_z} vs {expected}");
    let pmf: Vec<f64> = entries[0]["pmf"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(pmf.len(), 4);
    assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn oracle_hopfield_certificate() {
    let entries = oracle_entries(
        r#"{"model": {"family": "hopfield", "n": 8, "d": 2}, "betas": [1.0], "q": 3, "seed": 4,
            "oracle": {"epsilon": 0.05}}"#,
    );
    let cert = &entries[0]["certificate"];
    assert_eq!(cert["pass_log_z"], true);
    assert_eq!(cert["pass_kl"], true);
    assert!(cert["beta_scaled_bound_kl"].is_number());
    assert!(entries[0].get("pmf").is_none());
}

#[test]
fn oracle_too_large_exits_4() {
    let (dir, output) = run(
        "oracle",
        r#"{"model": {"family": "sk", "n": 30}, "betas": [1.0], "q": 3}"#,
    );
    assert_eq!(output.status.code(), Some(4));
    assert!(!out(&dir).join("oracle.json").exists());
}

#[test]
fn temper_near_degenerate_ladder() {
    let (dir, output) = run(
        "temper",
        r#"{"model": {"family": "sk", "n": 12}, "q": 2, "seed": 9,
            "sampler": {"kind": "ag_gibbs", "m": 1, "burn_in": 0, "chains": 2},
            "tempering": {"ladder": [1.0, 1.000001], "n_ex": 200, "n_mc": 2}}"#,
    );
    ok(&output);
    let o = out(&dir);
    for set in 0..2 {
        let stats = read_json(&o.join(format!("exchange_set_{set}.json")));
        let pair = &stats["pairs"][0];
        assert_eq!(pair["attempts"], 200);
        assert!(pair["rate"].as_f64().unwrap() > 0.99, "{pair}");
        for t in 0..2 {
            let rows = csv_rows(&o.join(format!("traces/temper_ag_gibbs_set{set}_replica{t}.csv")));
            assert_eq!(rows.len(), 400 - 40);
        }
    }
    let report = read_json(&o.join("diagnostics/temper_ag_gibbs_cold.json"));
    assert_eq!(report["chains"], 2);
    assert_eq!(report["beta"], 1.000001);
    assert_eq!(csv_rows(&o.join("benchmark.csv")).len(), 1);
}

#[test]
fn temper_requires_ladder() {
    let (_dir, output) = run(
        "temper",
        r#"{"model": {"family": "sk", "n": 12}, "sampler": {"kind": "ag_gibbs", "m": 1, "burn_in": 0}}"#,
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("tempering"));
}

#[test]
fn benchmark_cross_product_sorted() {
    let (dir, output) = run(
        "benchmark",
        r#"{"model": {"family": "lattice2d", "side": 4}, "betas": [0.6, 0.2, 0.44], "q": 2, "seed": 1,
            "sampler": {"kind": "heat_bath", "m": 200, "burn_in": 20, "chains": 2},
            "samplers": ["wolff", "heat_bath", "ag_gibbs"]}"#,
    );
    ok(&output);
    let rows = csv_rows(&out(&dir).join("benchmark.csv"));
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[2].clone())).collect();
    let expected: Vec<(String, String)> = ["ag_gibbs", "heat_bath", "wolff"]
        .iter()
        .flat_map(|s| ["0.2", "0.44", "0.6"].map(|b| (s.to_string(), b.to_string())))
        .collect();
    assert_eq!(keys, expected);
    assert!(rows.iter().all(|r| r.len() == 14 && !r[13].starts_with("error")));
}

#[test]
fn benchmark_rejects_incompatible_upfront() {
    let (dir, output) = run(
        "benchmark",
        r#"{"model": {"family": "sk", "n": 8}, "betas": [1.0], "q": 2,
            "sampler": {"kind": "heat_bath", "m": 20, "burn_in": 2},
            "samplers": ["heat_bath", "swendsen_wang"]}"#,
    );
    assert_eq!(output.status.code(), Some(3));
    assert!(!out(&dir).join("benchmark.csv").exists());
}

#[test]
fn resolved_config_reruns_exactly() {
    let (dir, output) = run("sample", SMALL_SAMPLE);
    ok(&output);
    let first = out(&dir);
    let resolved = first.join("resolved_config.json");
    let trace = "traces/ag_gibbs_beta0.44_chain0.csv";

    let again = dir.path().join("again");
    ok(&potts(&[
        "sample",
        "--config",
        resolved.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(first.join(trace)).unwrap(),
        fs::read(again.join(trace)).unwrap()
    );

    let reseeded = dir.path().join("reseeded");
    ok(&potts(&[
        "sample",
        "--config",
        resolved.to_str().unwrap(),
        "--seed",
        "6",
        "--out",
        reseeded.to_str().unwrap(),
    ]));
    assert_ne!(
        fs::read(first.join(trace)).unwrap(),
        fs::read(reseeded.join(trace)).unwrap()
    );
    assert_eq!(read_json(&reseeded.join("resolved_config.json"))["seed"], 6);
}
