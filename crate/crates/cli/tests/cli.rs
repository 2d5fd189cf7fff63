use std::path::Path;
use std::process::Command;

fn qosearch() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qosearch"))
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = qosearch()
        .args(["run", "--scenario", "table7-singlecall", "--seed", "4", "--mode", "control", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "trace.csv",
        "states.csv",
        "transitions.csv",
        "timeseries.csv",
        "global.csv",
        "episodes.csv",
        "kb.json",
        "summary.json",
        "scenario.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let s = summary(dir.path());
    assert_eq!(s["meta"]["seed"], 4);
    assert_eq!(s["meta"]["mode"], "control");
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = qosearch()
        .args(["run", "--scenario", "red-1kbps", "--mode", "baseline", "--learning", "off"])
        .env("QOS_SIM_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(summary(dir.path())["meta"]["learning"], false);
}

#[test]
fn unmet_constraints_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let status = qosearch()
        .args(["run", "--scenario", "table1-s3", "--mode", "control", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bad_scenario_is_an_error() {
    let out = qosearch().args(["run", "--scenario", "nope", "--out", "/tmp/unused"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
}

#[test]
fn presets_are_listed() {
    let out = qosearch().arg("presets").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "fig10-learning"));
}
