use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sns-keyrate"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

const MINIMAL: &str = "[channel]\nl_ac = 100.0\nl_bc = 100.0\n";

#[test]
fn point_json_has_positive_rate_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", MINIMAL);
    let out = run(&["point", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["rate"].as_f64().unwrap() > 0.0);
    assert!(v["report"]["failure_budget"].as_f64().unwrap() > 0.0);
    assert!(v["report"]["decoy"]["untagged"]["n1_lower"].as_f64().unwrap() > 0.0);
}

#[test]
fn invalid_delta_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", MINIMAL);
    let out = run(&["point", "--config", cfg.to_str().unwrap(), "--delta", "1.0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
}

#[test]
fn missing_field_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", "[channel]\nl_ac = 100.0\n");
    let out = run(&["point", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("l_bc"));
}

#[test]
fn unknown_mode_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", MINIMAL);
    let out = run(&["point", "--config", cfg.to_str().unwrap(), "--mode", "bb84"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mode_and_outlier_flags_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", MINIMAL);
    let c = cfg.to_str().unwrap();
    let rate = |extra: &[&str]| {
        let mut args = vec!["point", "--config", c];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert!(out.status.success());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        (v["rate"].as_f64().unwrap(), v["report"].clone())
    };
    let (orig, rep) = rate(&["--mode", "original"]);
    assert_eq!(orig, rep["rate_original"].as_f64().unwrap());
    let (scan, rep) = rate(&["--mode", "aopp-scan"]);
    assert_eq!(scan, rep["rate_aopp_scan"].as_f64().unwrap());
    let (aopp, _) = rate(&[]);
    let (outlier, _) = rate(&["--n-delta", "100"]);
    assert!(outlier < aopp && outlier > 0.99 * aopp);
}

#[test]
fn sweep_csv_rows_ascend_and_rates_fall() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        &format!("{MINIMAL}[sweep]\nstart = 100\nstop = 300\nstep = 50\n[output]\nformat = \"csv\"\n"),
    );
    let out_path = dir.path().join("s.csv");
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_path).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 5);
    let dist: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    let rate: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(dist.windows(2).all(|w| w[0] < w[1]));
    assert!(rate.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn optimize_output_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "o.toml", &format!("{MINIMAL}[optimize]\nbudget = 300\nstarts = 2\n"));
    let c = cfg.to_str().unwrap();
    let a = run(&["optimize", "--config", c, "--seed", "9"]);
    let b = run(&["optimize", "--config", c, "--seed", "9"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn mc_validate_small_run_passes() {
    let out = run(&["mc-validate", "--runs", "4", "--windows", "10000000", "--delta", "0.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["soundness"]["violations"].as_u64(), Some(0));
    assert_eq!(v["pass"].as_bool(), Some(true));
}
