use std::fs;
use std::process::Command;

const TINY: &str = r#"
epochs = 3
batch_size = 50
seed = 4

[data]
kind = "synthetic"
n = 200
test_n = 50

[model]
preset = "tiny-ae"

[optimizer]
kind = "kbfgs"
use_lbfgs = true
alpha = 0.1
"#;

fn kfqn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kfqn"))
}

#[test]
fn run_writes_lf_csv_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let status = kfqn()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--epochs", "2", "--seed", "9"])
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(!text.contains('\r'));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], kfqn::experiment::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,"));
    assert_eq!(lines[1].split(',').count(), 8);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("{TINY}\nlearning_rate = 1\n")).unwrap();
    let output = kfqn().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("learning_rate"));
}

#[test]
fn grid_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(
        &cfg,
        format!("{TINY}\n[grid]\nalpha = [0.03, 0.1]\ndamping = [0.3]\n"),
    )
    .unwrap();
    let out = dir.path().join("grid");
    let status = kfqn()
        .args(["grid", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--epochs", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    let summary = fs::read_to_string(out.join("grid_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.starts_with("alpha,damping,min_train_loss,best_epoch,diverged,best\n"));
}
