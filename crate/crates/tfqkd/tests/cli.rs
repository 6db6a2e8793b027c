//! End-to-end checks of the command-line surface: determinism, exit
//! codes, and file round-trips.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfqkd"))
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["analyze"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_1() {
    let out = bin()
        .args(["analyze", "--config"])
        .arg(data("201km.cfg"))
        .arg("--counts")
        .arg("/nonexistent/table.counts")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn analyze_emits_populated_report() {
    let out = bin()
        .args(["analyze", "--config"])
        .arg(data("201km.cfg"))
        .arg("--counts")
        .arg(data("201km.counts"))
        .args(["--ds-half", "8"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in [
        "n1_before_aopp",
        "e1ph_before_aopp",
        "key_rate",
        "epsilon_term_privacy_amplification",
        "config_mu_x",
    ] {
        assert!(text.contains(key), "missing `{key}` in report");
    }
}

#[test]
fn simulate_is_byte_identical_under_seed() {
    let run = || {
        let out = bin()
            .args(["simulate", "--config"])
            .arg(data("301km.cfg"))
            .args(["--seed", "7", "--n-frames", "300000", "--ds-half", "8"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    assert_eq!(run(), run());
}

#[test]
fn sweep_emits_requested_rows() {
    let out = bin()
        .args(["sweep", "--config"])
        .arg(data("201km.cfg"))
        .args(["--from", "100", "--to", "550", "--step", "50"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "distance_km,loss_db,R,plob");
    assert_eq!(rows.len(), 1 + 10);
}

#[test]
fn untagged_override_changes_distillation() {
    let report = |args: &[&str]| {
        let mut cmd = bin();
        cmd.args(["analyze", "--config"])
            .arg(data("502km.cfg"))
            .arg("--counts")
            .arg(data("502km.counts"))
            .args(args);
        let out = cmd.output().unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let grab = |text: &str, key: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split('=').nth(1))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    let default = report(&[]);
    let both = report(&["--untagged", "yz"]);
    // The dataset records z-only distillation; counting the strong
    // decoy as well raises the untagged total.
    assert!(default.contains("untagged_sources = z"));
    assert!(both.contains("untagged_sources = yz"));
    assert!(grab(&both, "n1_before_aopp") > grab(&default, "n1_before_aopp"));
}

#[test]
fn simulate_writes_loadable_table() {
    let tmp = std::env::temp_dir().join("tfqkd_cli_sim.counts");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(data("502km.cfg"))
        .args(["--ds-half", "10", "--out"])
        .arg(&tmp)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // The written table must load and re-analyze.
    let analyzed = bin()
        .args(["analyze", "--config"])
        .arg(data("502km.cfg"))
        .arg("--counts")
        .arg(&tmp)
        .output()
        .unwrap();
    assert!(analyzed.status.success());
    let _ = std::fs::remove_file(&tmp);
}
