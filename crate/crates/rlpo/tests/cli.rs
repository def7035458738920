mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rlpo::engine::STEPS_LOG;
use rlpo::record::{read_log, StepRecord};

const NAME: &str = "cli";

fn rlpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlpo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, steps: usize) -> String {
    let cfg = common::run_config(NAME, steps);
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_problems_exit_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();

    let o = rlpo(&["run", "--config", "/nonexistent/run.json", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));

    let mut cfg = common::run_config(NAME, 1);
    cfg.eta = 1.5;
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = rlpo(&["run", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    cfg.eta = 0.7;
    cfg.feedback_mode = rlpo::FeedbackMode::Hf;
    fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = rlpo(&["run", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--port"));

    let o = rlpo(&["resume", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_stop_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), 3);
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let o = rlpo(&["run", "--config", &config, "--out", run_s, "--stop-after", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("stopped after 1 of 3 steps"));

    let o = rlpo(&["run", "--config", &config, "--out", run_s]);
    assert_eq!(o.status.code(), Some(2));

    let o = rlpo(&["resume", run_s]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("3 of 3 steps done"));
    let o = rlpo(&["resume", run_s]);
    assert!(stdout(&o).contains("already complete"));

    let eval_cfg = tmp.path().join("eval.json");
    fs::write(
        &eval_cfg,
        r#"{"top_k": 2, "concept_samples": 6, "test_images": 6, "set_size": 6, "tcav_repeats": 1}"#,
    )
    .unwrap();
    let eval_cfg = eval_cfg.to_str().unwrap();

    // Nothing can reach η when every score sits below it.
    let log: Vec<StepRecord> = read_log(&run.join(STEPS_LOG)).unwrap();
    let lowered: String = log
        .into_iter()
        .map(|mut r| {
            r.ts1 = 0.1;
            r.ts2 = 0.2;
            serde_json::to_string(&r).unwrap() + "\n"
        })
        .collect();
    fs::write(run.join(STEPS_LOG), lowered).unwrap();
    let o = rlpo(&["eval", run_s, "--config", eval_cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("no keyword reached the explainable state"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report")).unwrap()).unwrap();
    assert_eq!(report["explainable_empty"], true);
    assert_eq!(report["deletion"].as_array().unwrap().len(), 2);

    let o = rlpo(&["eval", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn artifacts_can_be_built_step_by_step() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    fs::write(
        p("world.json"),
        r#"{"train_per_class": 12, "test_per_class": 6, "random_pool_size": 12, "templates_per_keyword": 8}"#,
    )
    .unwrap();
    let o = rlpo(&["world", "build", "--config", &p("world.json"), "--out", &p("world")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("world with 54 images"));

    fs::write(p("probe.json"), r#"{"config": {"hidden_dims": [16], "epochs": 2, "learning_rate": 0.001, "batch_size": 16, "seed": 0}, "neutral_images": 6}"#).unwrap();
    let o = rlpo(&["train-probe", "--world", &p("world"), "--out", &p("probe"), "--config", &p("probe.json")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("probe.bin").exists());

    fs::write(p("gen.json"), r#"{"config": {"image_size": [16, 16], "hidden": [16], "time_dim": 4, "prompt_dim": 4, "adapter_rank": 2, "adapter_scale": 1.0, "t_diff": 5, "beta_start": 0.001, "beta_end": 0.2}, "bank_per_keyword": 4}"#).unwrap();
    let o = rlpo(&["pretrain-gen", "--world", &p("world"), "--out", &p("gen"), "--config", &p("gen.json"), "--steps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = rlpo(&["seeds", "--world", &p("world"), "--out", &p("actions.json")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stripes"));

    let o = rlpo(&["world", "build", "--config", &p("probe.json"), "--out", &p("w2")]);
    assert_eq!(o.status.code(), Some(2));
}
