use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rcyolo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcyolo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let text = format!(
        r#"seed = 3

[paths]
annotations = "{0}/annotations.txt"
frames = "{0}/frames.bin"
out = "{0}"

[synth]
videos = 3
video_len = 300
"#,
        dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn playback_pipeline_succeeds_with_json_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for cmd in ["synth", "prepare"] {
        let o = rcyolo(&[cmd, "--config", &cfg], dir.path());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(v.is_object());
    }
    let o = rcyolo(
        &[
            "eval",
            "--config",
            &cfg,
            "--playback",
            "--confidence-threshold",
            "0.5",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["precision"], 1.0);
    assert_eq!(v["recall"], 1.0);
    assert!(dir.path().join("eval_report.json").exists());
}

#[test]
fn missing_threshold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    rcyolo(&["synth", "--config", &cfg], dir.path());
    rcyolo(&["prepare", "--config", &cfg], dir.path());
    let o = rcyolo(&["eval", "--config", &cfg, "--playback"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_inputs_and_bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcyolo(&["prepare", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).starts_with("error[missing-input]:"),
        "{}",
        stderr(&o)
    );

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 2\n").unwrap();
    let o = rcyolo(&["prepare", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));

    let o = rcyolo(&["train", "--config", "nope.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).starts_with("error[missing-input]:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcyolo(&["frobnicate"], dir.path());
    assert!(!o.status.success());
}
