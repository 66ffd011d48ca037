//! End-to-end checks of the `fewstep` binary.

use std::path::Path;
use std::process::{Command, Output};

fn fewstep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewstep"))
        .args(args)
        .env_remove("FEWSTEP_OUT_DIR")
        .env_remove("FEWSTEP_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The default config shrunk so every stage finishes in seconds.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let o = fewstep(&["print-config"]);
    assert!(o.status.success());
    let mut v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    v["out_dir"] = dir.join("run").to_string_lossy().into_owned().into();
    v["teacher"]["net"]["hidden"] = serde_json::json!([16, 16]);
    v["teacher"]["iterations"] = 200.into();
    v["teacher"]["eval_every"] = 100.into();
    v["distill"]["iterations"] = 20.into();
    v["distill"]["eval_every"] = 10.into();
    v["trainer"]["iterations"] = 20.into();
    v["trainer"]["eval_every"] = 10.into();
    v["trainer"]["save_every"] = 10.into();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn print_config_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = fewstep(&["print-config"]);
    let path = dir.path().join("c.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["seed", "t_max", "teacher", "distill", "trainer"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    // Loading fails only on the missing teacher, not on the config.
    let o = fewstep(&[
        "train-r1",
        "--config",
        path.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("teacher"), "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_1_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"seed\": 3,\n  ]\n").unwrap();
    let o = fewstep(&["pretrain-teacher", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_1() {
    let o = fewstep(&["distill", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.json"));
}

#[test]
fn unknown_subcommand_exits_1() {
    assert_eq!(fewstep(&["launch"]).status.code(), Some(1));
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = fewstep(&["verify", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);

    let o = fewstep(&["verify", "--inject-fault", "flip-delta-kl-sign"]);
    assert_eq!(o.status.code(), Some(3));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn stages_run_resume_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for stage in ["pretrain-teacher", "distill", "train-r1"] {
        let o = fewstep(&[stage, "--config", cfg, "--seed", "5"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("r1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 5);

    let o = fewstep(&["train-r1", "--config", cfg, "--seed", "5", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = fewstep(&[
        "evaluate",
        "--config",
        cfg,
        "--seed",
        "5",
        "--samples",
        "512",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["mean_reward"]
        .as_f64()
        .is_some_and(|r| (0.0..=1.0).contains(&r)));

    let plots = dir.path().join("plots");
    let o = fewstep(&[
        "export-plots",
        "--out",
        plots.to_str().unwrap(),
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["train_curves.csv", "eval_curves.csv"] {
        let text = std::fs::read_to_string(plots.join(name)).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "run_id,variant,iteration,metric,value"
        );
        assert!(text.lines().count() > 1);
    }
}

#[test]
fn seed_override_changes_only_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&cfg).unwrap()).unwrap();
    v["teacher"]["iterations"] = 10.into();
    v["teacher"]["eval_every"] = 10.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = fewstep(&[
        "pretrain-teacher",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("run/teacher/manifest.json")).unwrap(),
    )
    .unwrap();
    let mut recorded = m["config"].clone();
    assert_eq!(recorded["seed"], 11);
    recorded["seed"] = v["seed"].clone();
    assert_eq!(recorded, v);
}
