use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn feeder(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../feeders")
        .join(name)
}

fn gridpilot(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridpilot"))
        .args(args)
        .current_dir(dir)
        .env("GRIDPILOT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"feeder = "{}"
seed = 5

[scenarios]
count = 200

[dsse]
hidden_layers = 2
hidden_units = 16
epochs = 2
learning_rate = 0.001

[train]
episodes = 4
batch_size = 16
actor_hidden = [32, 24]
critic_hidden = [32, 24]

[eval]
oracle_points = 21
online_steps = 10
"#,
        feeder("4bus.json").display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let commands = [
        "gen-scenarios",
        "train-dsse",
        "eval-dsse",
        "train-agent",
        "evaluate",
        "run-online",
        "oracle",
    ];
    for cmd in commands {
        let out = gridpilot(&[cmd, "--config", cfg, "--out", "out"], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).expect("summary is json");
        assert_eq!(summary["command"], cmd);
    }
    let out = dir.path().join("out");
    for file in [
        "scenarios.csv",
        "train_scenarios.csv",
        "test_scenarios.csv",
        "dsse.bin",
        "dsse_loss.csv",
        "dsse_metrics.csv",
        "agent.bin",
        "rewards.csv",
        "train_steps.csv",
        "voltage_profile.csv",
        "eval_scenarios.csv",
        "online_log.csv",
        "apr_events.csv",
        "oracle.csv",
        "summary_train_agent.json",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = gridpilot(&["gen-scenarios", "--config", cfg, "--out", "a"], dir.path());
    let b = gridpilot(
        &["gen-scenarios", "--config", cfg, "--seed", "6", "--out", "b"],
        dir.path(),
    );
    assert!(a.status.success() && b.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("scenarios.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    std::fs::write(dir.path().join("typo.toml"), "[train]\nepisodez = 3\n").unwrap();
    let out = gridpilot(&["train-agent", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let missing = format!("feeder = \"{}\"\n", dir.path().join("nope.json").display());
    std::fs::write(dir.path().join("missing.toml"), missing).unwrap();
    let out = gridpilot(&["gen-scenarios", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(dir.path().join("broken.json"), "{\"buses\": 3}").unwrap();
    std::fs::write(dir.path().join("broken.toml"), "feeder = \"broken.json\"\n").unwrap();
    let out = gridpilot(&["gen-scenarios", "--config", "broken.toml"], dir.path());
    assert_eq!(out.status.code(), Some(4));

    let out = gridpilot(
        &["evaluate", "--config", small_config(dir.path()).to_str().unwrap()],
        dir.path(),
    );
    assert!(!out.status.success(), "evaluate without a trained agent must fail");

    let out = gridpilot(&["no-such-command"], dir.path());
    assert!(!out.status.success());
}
