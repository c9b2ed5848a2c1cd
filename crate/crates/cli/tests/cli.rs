use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn zeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeta")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn data(name: &str) -> String {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name);
    root.to_string_lossy().into_owned()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).to_string_lossy().into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_owned()))
        .unwrap_or_else(|| panic!("no `{key}` line in:\n{text}"))
}

#[test]
fn kb_validate_counts_match_file() {
    let path = data("example-kb.json");
    let out = zeta(&["kb", "validate", &path]);
    assert_eq!(out.status.code(), Some(0));
    let raw: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let text = stdout(&out);
    for (key, line) in [("attributes", "attributes"), ("concepts", "concepts"), ("relations", "relations")] {
        assert_eq!(field(&text, line), raw[key].as_array().unwrap().len().to_string());
    }
    let yellow = raw["relations"].as_array().unwrap().iter().filter(|r| r[1] == "yellow").count();
    let row = text.lines().find(|l| l.starts_with("yellow ")).unwrap();
    assert_eq!(row.split_whitespace().nth(1).unwrap(), yellow.to_string());
}

#[test]
fn kb_validate_rejects_dangling_edge() {
    let out = zeta(&["kb", "validate", &fixture("dangling.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("taxi"));
}

#[test]
fn kb_validate_empty_kb() {
    let out = zeta(&["kb", "validate", &fixture("empty.json")]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(field(&text, "attributes"), "0");
    assert_eq!(field(&text, "concepts"), "0");
    assert_eq!(field(&text, "relations"), "0");
}

#[test]
fn params_examples() {
    for (threshold, errors, n, exact) in
        [("1e-4", "0", "14", "1/16384"), ("1e-6", "1", "25", "26/33554432"), ("1e-6", "0", "20", "1/1048576")]
    {
        let out = zeta(&["params", "--threshold", threshold, "--errors", errors]);
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(&out);
        assert_eq!(field(&text, "challenges"), n);
        assert!(field(&text, "exact").starts_with(exact), "{text}");
    }
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["params", "--threshold", "0"],
        vec!["params", "--threshold", "1.5"],
        vec!["params"],
        vec!["simulate", "--error-rate", "1.2"],
        vec!["simulate", "--threshold", "1e-4", "--challenges", "7"],
        vec!["attack", "--min-leaves", "3", "--max-leaves", "2"],
        vec!["frobnicate"],
    ] {
        assert_eq!(zeta(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn serve_fails_before_binding_on_bad_kb() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");
    let out = zeta(&[
        "serve",
        "--kb",
        &fixture("dangling.json"),
        "--store",
        store.to_str().unwrap(),
        "--addr",
        "127.0.0.1:0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stdout(&out).contains("listening"));
    assert!(!store.exists());
    let missing = zeta(&["serve", "--kb", "/nonexistent/kb.json", "--addr", "127.0.0.1:0"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn error_free_simulation_always_accepts() {
    let out = zeta(&["simulate", "--users", "3", "--sessions", "10", "--challenges", "20", "--errors", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let row = stdout(&out).lines().nth(1).unwrap().to_owned();
    let cols: Vec<_> = row.split_whitespace().collect();
    assert_eq!(&cols[..6], ["honest(p=0)", "20", "0", "30", "30", "1.000000"]);
}

#[test]
fn simulate_wire_parity() {
    let out = zeta(&["simulate", "--users", "2", "--sessions", "3", "--error-rate", "0.05", "--wire", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("wire parity: ok"));
}

fn attack_csv(extra: &[&str]) -> Vec<Vec<f64>> {
    let mut args = vec![
        "attack",
        "--kb",
        "",
        "--challenges",
        "6",
        "--errors",
        "0",
        "--min-leaves",
        "2",
        "--max-leaves",
        "2",
        "--trials",
        "2000",
    ];
    let kb = data("toy-kb.json");
    args[2] = &kb;
    args.extend_from_slice(extra);
    let out = zeta(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("observations,surviving,estimate,ci_low,ci_high"));
    lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn attack_curve_on_toy_kb() {
    let rows = attack_csv(&["--max-observations", "5", "--seed", "3"]);
    assert_eq!(rows.len(), 6);
    let enumerated = zeta_core::attacker::HypothesisSet::enumerate(
        &zeta_core::kb::toy(),
        zeta_core::secret::GenerationLimits { min_leaves: 2, max_leaves: 2, ..Default::default() },
        u128::MAX,
    )
    .unwrap()
    .len();
    assert_eq!(rows[0][1] as usize, enumerated);
    assert!(rows.windows(2).all(|w| w[1][1] <= w[0][1]));
    let last = rows.last().unwrap();
    assert!(last[4] >= rows[0][2], "final interval should reach the blind estimate");
    assert_eq!(rows, attack_csv(&["--max-observations", "5", "--seed", "3"]));
}

#[test]
fn attack_limits_too_large_is_domain_error() {
    let out = zeta(&["attack", "--max-leaves", "8", "--max-depth", "8", "--cap", "1000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cap"));
}
