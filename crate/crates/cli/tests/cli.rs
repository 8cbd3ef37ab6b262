//! Exit codes and output formats of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

fn mfirl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfirl"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn demos(dir: &Path) {
    let out = mfirl(
        &["gen-experts", "--env", "lr", "--agents", "10", "--plays", "2", "--horizon", "5", "--out", "d.json"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_environment_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfirl(&["gen-experts", "--env", "chess", "--out", "d.json"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"epochz": 3}"#).unwrap();
    assert_eq!(code(&mfirl(&["run", "--config", "c.json", "--out", "o"], dir.path())), 2);
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfirl(&["train", "--demos", "nope.json", "--env", "lr", "--out", "r.json"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn demos_for_another_environment_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    demos(dir.path());
    let out = mfirl(&["train", "--demos", "d.json", "--env", "virus", "--out", "r.json"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    demos(dir.path());
    std::fs::write(dir.path().join("c.json"), r#"{"irl": {"learning_rate": 1e300, "epochs": 20}}"#).unwrap();
    let out = mfirl(
        &["train", "--demos", "d.json", "--env", "lr", "--config", "c.json", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn train_and_eval_write_readable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    demos(dir.path());
    std::fs::write(dir.path().join("c.json"), r#"{"irl": {"epochs": 5, "samples": 16}}"#).unwrap();
    let out = mfirl(
        &["train", "--demos", "d.json", "--env", "lr", "--config", "c.json", "--out", "r.json", "--log", "log.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.starts_with("epoch,L_hat,"));
    let out = mfirl(
        &["eval", "--reward", "r.json", "--env", "lr", "--variant", "original", "--horizon", "5", "--out", "e.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(doc["variant"], "original");
    assert!(doc["evaluation"]["dev_mf"].as_f64().unwrap() >= 0.0);
}

#[test]
fn eval_rejects_a_model_for_another_game() {
    let dir = tempfile::tempdir().unwrap();
    demos(dir.path());
    std::fs::write(dir.path().join("c.json"), r#"{"irl": {"epochs": 2, "samples": 8}}"#).unwrap();
    let out = mfirl(
        &["train", "--demos", "d.json", "--env", "lr", "--config", "c.json", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let out = mfirl(&["eval", "--reward", "r.json", "--env", "invest", "--out", "e.json"], dir.path());
    assert_eq!(code(&out), 2);
}
