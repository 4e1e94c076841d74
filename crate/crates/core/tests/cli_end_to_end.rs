use std::path::Path;
use std::process::{Command, Output};

use geofed::federation::FederationConfig;
use geofed::tensorio::decode_checkpoint;
use serde_json::Value;

fn geofed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn emit_run_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let emit = tmp.path().join("cfg");
    let o = geofed(&["preset", "comm_audit", "--emit", p(&emit), "--seed", "17"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);

    let toy = emit.join("comm_audit_toy_geolora.toml");
    let cfg = FederationConfig::from_toml(&std::fs::read_to_string(&toy).unwrap()).unwrap();
    assert_eq!(cfg.seed, 17);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = geofed(&["run", p(&toy), "--out", p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cross-modal CKA"));
    for f in [
        "config.toml",
        "metrics.jsonl",
        "summary.json",
        "checkpoint.bin",
        "manifest.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
    let ckpt = decode_checkpoint(&std::fs::read(a.join("checkpoint.bin")).unwrap()).unwrap();
    assert!(ckpt.iter().any(|t| t.name.starts_with("materialized.")));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 17);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);

    let full = emit.join("comm_audit_toy_fedavg_full.toml");
    let o = geofed(&["run", p(&full), "--out", p(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = geofed(&["compare", p(&a), p(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("total uplink bytes"));
    assert!(text.contains("uplink ratio b/a"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let emit = tmp.path().join("cfg");
    assert!(geofed(&["preset", "comm_audit", "--emit", p(&emit)]).status.success());
    let toy = emit.join("comm_audit_toy_geolora.toml");
    let out = tmp.path().join("run");
    let o = geofed(&["--seed", "99", "run", p(&toy), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = FederationConfig::from_toml(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(written.seed, 99);
}

#[test]
fn analytic_config_reports_savings_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let emit = tmp.path().join("cfg");
    assert!(geofed(&["preset", "comm_audit", "--emit", p(&emit)]).status.success());
    let out = tmp.path().join("analytic");
    let o = geofed(&["run", p(&emit.join("comm_audit_analytic_d4096.toml")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("per-matrix savings, B only:  99.9023%"),
        "{}",
        stdout(&o)
    );
    assert!(!out.join("checkpoint.bin").exists());
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["per_matrix_savings_b_only"].as_f64().unwrap() >= 0.999);
    // Analytic runs have nothing to compare.
    let o = geofed(&["compare", p(&out), p(&out)]);
    assert!(!o.status.success());
}

#[test]
fn existing_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let emit = tmp.path().join("cfg");
    assert!(geofed(&["preset", "comm_audit", "--emit", p(&emit)]).status.success());
    let o = geofed(&[
        "run",
        p(&emit.join("comm_audit_toy_geolora.toml")),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("already exists"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "no_such_field = 1\n").unwrap();
    let o = geofed(&["run", p(&bad), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = geofed(&["preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    for name in geofed::presets::PRESET_NAMES {
        assert!(stderr(&o).contains(name));
    }

    let o = geofed(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preset_without_emit_prints_parseable_toml() {
    let o = geofed(&["preset", "dora_vs_lora"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let sections: Vec<&str> = text.split("# --- ").filter(|s| !s.is_empty()).collect();
    assert_eq!(sections.len(), 2);
    for s in sections {
        let body = s.split_once('\n').unwrap().1;
        FederationConfig::from_toml(body).unwrap();
    }
}
