use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmga(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmga"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

const CONFIG: &str = r#"
name = "cli"

[synth]
n_scans = 40
prevalence = 0.3

[classifier]
epochs = 2
hidden_size = 8
"#;

#[test]
fn stage_by_stage_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("c.toml"), CONFIG).unwrap();

    let out = mmga(dir, &["--config", "c.toml", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/cli/report/report.txt").is_file());

    let steps: [&[&str]; 11] = [
        &["synth"],
        &["soi"],
        &["ensemble"],
        &["build-graphs"],
        &["train"],
        &["predict"],
        &["threshold"],
        &["localize"],
        &["evaluate"],
        &["report"],
        &["plot", "--output", "plots/roc.svg"],
    ];
    for step in steps {
        let mut args = vec!["--config", "c.toml", "--run-dir", "staged", "--jobs", "2"];
        args.extend_from_slice(step);
        let out = mmga(dir, &args);
        assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.join("runs/cli/evaluate/evaluation.json")).unwrap();
    let b = fs::read(dir.join("staged/evaluate/evaluation.json")).unwrap();
    assert_eq!(a, b);
    assert!(fs::read_to_string(dir.join("plots/roc.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = mmga(dir, &["--run-dir", "empty", "build-graphs"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `graphs`") && err.contains("dataset"), "{err}");

    let out = mmga(dir, &["--run-dir", "empty", "report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing stages"));

    let out = mmga(dir, &["--soi-window", "4", "soi"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("soi.window"));

    fs::write(dir.join("bad.toml"), "[soi]\nthresold = 0.3\n").unwrap();
    let out = mmga(dir, &["--config", "bad.toml", "synth"]);
    assert!(!out.status.success());
}

#[test]
fn overrides_land_in_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("c.toml"), CONFIG).unwrap();
    let out = mmga(
        dir,
        &["--config", "c.toml", "--seed", "9", "--lr", "0.02", "--aggregate", "union", "synth"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snap = fs::read_to_string(dir.join("runs/cli/config.toml")).unwrap();
    let cfg = mmga::config::PipelineConfig::from_toml(&snap).unwrap();
    assert_eq!(cfg.synth.seed, 9);
    assert_eq!(cfg.classifier.seed, 9);
    assert_eq!(cfg.classifier.learning_rate, 0.02);
    assert_eq!(cfg.ensemble.aggregate, mmga::config::AggregateTables::Union);
}
