//! Drives the `streamfp` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn streamfp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamfp"))
        .args(args)
        .current_dir(cwd)
        .env("STREAMFP_THREADS", "1")
        .output()
        .expect("spawn streamfp")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "[stream]\nlambda = 600.0\ndataset_size = 800\ntasks = 4\n[data]\ndim = 12\n[run]\nseeds = [3]\n";

#[test]
fn missing_required_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[stream]\ndataset_size = 100\n").unwrap();
    let o = streamfp(&["run", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stream.lambda"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_values_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = streamfp(
        &["run", "--config", "c.toml", "--override", "selection.sigma=1.5", "--override", "buffer.size=0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("selection.sigma") && err.contains("buffer.size"), "{err}");
}

#[test]
fn unknown_subcommand_and_suite_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(streamfp(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(streamfp(&["verify", "nonsense"], dir.path()).status.code(), Some(2));
}

#[test]
fn run_writes_metrics_and_a_replayable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = streamfp(&["run", "--config", "c.toml", "--seed", "9", "--out", "res"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = std::fs::read_to_string(dir.path().join("res/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("run_id,"), "{header}");
    assert_eq!(lines.count(), 1);

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/metrics.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 1);
    assert_eq!(json[0]["seed"], 9);

    let manifest: toml::Table = std::fs::read_to_string(dir.path().join("res/manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["run"]["seeds"].as_array().unwrap()[0].as_integer(), Some(9));
    assert_eq!(manifest["stream"]["lambda"].as_float(), Some(600.0));
    let info = &manifest["manifest"];
    assert_eq!(info["engine_version"].as_str(), Some(env!("CARGO_PKG_VERSION")));
    assert_eq!(info["master_seeds"].as_array().unwrap().len(), 1);
    assert_eq!(info["measured_batch_times"].as_array().unwrap().len(), 1);
}

#[test]
fn dump_config_resolves_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = streamfp(&["dump-config", "--config", "c.toml", "--override", "buffer.size=64"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let t: toml::Table = String::from_utf8(o.stdout).unwrap().parse().unwrap();
    assert_eq!(t["buffer"]["size"].as_integer(), Some(64));
    assert_eq!(t["stream"]["batch_size"].as_integer(), Some(20));
    assert_eq!(t["selection"]["selector"].as_str(), Some("streamfp"));
}

#[test]
fn verify_and_bench_report_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = streamfp(&["verify", "sampler", "--trials", "20000"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let o = streamfp(
        &["bench", "--selectors", "streamfp,random", "--b", "64", "--dim", "16", "--n", "8", "--repeats", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(out.lines().nth(1).unwrap().starts_with("streamfp,"));
}
