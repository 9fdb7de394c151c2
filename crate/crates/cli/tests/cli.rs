use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dharq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dharq")).args(args).output().expect("spawn dharq")
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(2).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn analyze_row_count_and_fingerprint() {
    let out = dharq(&["analyze", "--snr-db", "0:20:1", "--samples", "4096"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let fp = lines.next().unwrap();
    assert!(fp.starts_with("# dharq ") && fp.contains("seed=1") && fp.contains("samples=4096") && fp.contains("mode=normal"));
    assert!(lines.next().unwrap().starts_with("snr_db,k,protocol,"));
    assert_eq!(lines.count(), 21 * 3);
}

#[test]
fn m0_dharq_row_equals_harq_row() {
    let out = dharq(&["analyze", "--snr-db", "8", "--m", "0", "--protocols", "harq,dharq", "--samples", "8192"]);
    assert!(out.status.success());
    let rows = data_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 2);
    let (harq, dharq) = (&rows[0], &rows[1]);
    let f = |r: &[String], i: usize| r[i].parse::<f64>().unwrap();
    assert!((f(harq, 5) - f(dharq, 5)).abs() < 1e-12, "per");
    assert!((f(harq, 7) - f(dharq, 7)).abs() < 1e-12, "exact-count throughput");
}

#[test]
fn empty_protocol_list_is_usage_error() {
    let out = dharq(&["analyze", "--protocols", ""]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol"));
    let out = dharq(&["analyze", "--m", "2"]);
    assert!(!out.status.success());
}

#[test]
fn rerun_with_cache_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("eps.json");
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = dharq(&[
            "analyze",
            "--snr-db",
            "4:8:2",
            "--samples",
            "5000",
            "--cache",
            cache.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        fs::read(path).unwrap()
    };
    let first = run("a.csv");
    assert!(cache.exists());
    let second = run("b.csv");
    assert_eq!(first, second);
    let third = dharq(&["analyze", "--snr-db", "4:8:2", "--samples", "5000"]).stdout;
    assert_eq!(first, third, "cache must not change results");
}

#[test]
fn sweep_rate_rows_per_protocol() {
    let out = dharq(&["sweep-rate", "--snr-db", "10", "--samples", "4096"]);
    assert!(out.status.success());
    let rows = data_rows(&String::from_utf8(out.stdout).unwrap());
    for p in ["fixed", "harq", "dharq"] {
        assert_eq!(rows.iter().filter(|r| r[2] == p).count(), 8);
    }
}

#[test]
fn oversized_k_fails_row_but_run_continues() {
    let out = dharq(&["sweep-rate", "--snr-db", "10", "--samples", "2048", "--k-grid", "32,80", "--protocols", "fixed"]);
    assert_eq!(out.status.code(), Some(3));
    let rows = data_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].last().unwrap(), "ok");
    assert!(rows[1].last().unwrap().starts_with("error"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn cdf_quantiles_sorted_in_unit_interval() {
    let out = dharq(&["cdf", "--snr-db", "10", "--realizations", "3000", "--cdf-points", "200", "--protocols", "dharq,fixed"]);
    assert!(out.status.success());
    let rows = data_rows(&String::from_utf8(out.stdout).unwrap());
    for p in ["dharq", "fixed"] {
        let vals: Vec<f64> = rows.iter().filter(|r| r[1] == p).map(|r| r[5].parse().unwrap()).collect();
        assert!(!vals.is_empty() && vals.len() <= 200);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn simulate_is_deterministic_and_flags_agreement() {
    let args = ["simulate", "--snr-db", "10", "--packets", "20000", "--samples", "20000", "--warmup", "100"];
    let a = dharq(&args);
    let b = dharq(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let header: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let agreement = header.iter().position(|c| *c == "agreement").unwrap();
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[agreement] == "pass" || r[agreement] == "fail"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "snr-db = 5:7:1\nsamples=2048\nprotocols=harq\n").unwrap();
    let json = dir.path().join("out.json");
    let out = dharq(&["analyze", "--config", cfg.to_str().unwrap(), "--snr-db", "6", "--json", json.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(data_rows(&String::from_utf8(out.stdout).unwrap()).len(), 1);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["rows"][0]["protocol"], "harq");
    assert!(Path::new(&json).exists());
}
