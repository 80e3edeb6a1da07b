use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn autochain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autochain")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"
name = "tiny"
seed = 5
duration = 30.0
[topology]
obms = 3
vehicles = 2
[[script]]
action = "publish_update"
at = 2.0
ecu = "brake"
version = "1.1"
[expect]
installs = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn list_names_every_bundled_scenario() {
    let out = autochain(&["list"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in ["wrsu_happy_path", "ddos", "full_demo"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from:\n{text}");
    }
}

#[test]
fn passing_run_exits_zero_and_saves_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "tiny.toml", TINY);
    let trace = dir.path().join("tiny.jsonl");
    let out = autochain(&["run", &config, "--trace", trace.to_str().unwrap(), "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["metrics"]["installs"], 2.0);

    // the saved trace scores the same
    let again = autochain(&["report", trace.to_str().unwrap(), "--format", "json"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(stdout(&again), stdout(&out));
}

#[test]
fn unmet_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "greedy.toml", &TINY.replace("installs = 2", "installs = 3"));
    let out = autochain(&["run", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("installs"));
}

#[test]
fn bad_config_exits_two_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.toml", &TINY.replace("obms = 3", "obms = 0"));
    for cmd in ["run", "validate"] {
        let out = autochain(&[cmd, &config]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("topology.obms"), "{cmd}");
    }
    let good = write(dir.path(), "good.toml", TINY);
    let out = autochain(&["validate", &good]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("tiny: ok"));
}

#[test]
fn seed_override_changes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for seed in ["1", "1", "2"] {
        let path = dir.path().join(format!("t{}.jsonl", traces.len()));
        let out =
            autochain(&["run", "--bundled", "insurance_honest", "--seed", seed, "--trace", path.to_str().unwrap()]);
        assert!(out.status.success());
        traces.push(fs::read_to_string(path).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    assert_ne!(traces[0], traces[2]);
}

#[test]
fn batch_runs_files_and_bundled_names_together() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "tiny.toml", TINY);
    let traces = dir.path().join("traces");
    let out = autochain(&["batch", &config, "handover_crossover", "--trace-dir", traces.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert_eq!(stdout(&out), "pass  tiny\npass  handover_crossover\n");
    assert!(traces.join("tiny.jsonl").exists());
    assert!(traces.join("handover_crossover.jsonl").exists());
}

#[test]
fn unknown_bundled_name_is_an_error() {
    let out = autochain(&["run", "--bundled", "nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
