use std::path::Path;
use std::process::{Command, Output};

use kvadapt::config::RunConfig;
use kvadapt::workflow::{acceptance_tasks, pretrain_tasks};

fn kvadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvadapt"))
        .current_dir(dir)
        .env_remove("KVADAPT_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap()
}

/// One patch and one slide task on a small backbone with short schedules.
fn write_tiny_config(dir: &Path) {
    let mut cfg = RunConfig::with_seed(9);
    cfg.backbone.d_v = 16;
    cfg.backbone.d_t = 16;
    cfg.backbone.n_layers_v = 1;
    cfg.backbone.n_layers_t = 1;
    cfg.backbone.n_heads = 2;
    cfg.pretrain.encoder_epochs = 1;
    cfg.pretrain.decoder_epochs = 2;
    let all = acceptance_tasks();
    cfg.tasks = vec![all[4].clone(), all[1].clone()];
    for t in &mut cfg.tasks {
        t.n_per_class = 10;
    }
    cfg.pretrain_tasks = pretrain_tasks()[..1].to_vec();
    cfg.train.patch.epochs = 2;
    cfg.train.slide.epochs = 2;
    std::fs::write(dir.join("run.toml"), cfg.to_toml().unwrap()).unwrap();
}

#[test]
fn config_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_json(&kvadapt(dir.path(), &["evaluate"]));
    assert_eq!(e["error"], "config");
    std::fs::write(dir.path().join("bad.toml"), "paths = 3\n").unwrap();
    let e = error_json(&kvadapt(dir.path(), &["--config", "bad.toml", "evaluate"]));
    assert_eq!(e["error"], "config");
    let out = kvadapt(dir.path(), &["init-config", "--seed", "5"]);
    assert!(out.status.success());
    std::fs::write(dir.path().join("run.toml"), &out.stdout).unwrap();
    let e = error_json(&kvadapt(dir.path(), &["--config", "run.toml", "evaluate"]));
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("kvadapt pretrain"));
}

#[test]
fn tiny_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "run.toml"];
        full.extend_from_slice(args);
        kvadapt(d, &full)
    };
    let e = error_json(&run(&["add-task", "--task", "lung_subtype"]));
    assert_eq!(e["error"], "missing_artifact");
    assert!(run(&["pretrain"]).status.success());
    let e = error_json(&run(&["evaluate"]));
    assert!(e["message"].as_str().unwrap().contains("kvadapt add-task"));
    let out = run(&["add-task", "--all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e = error_json(&run(&["add-task", "--task", "lung_subtype"]));
    assert_eq!(e["error"], "conflict");
    let e = error_json(&run(&["add-task", "--task", "nope"]));
    assert_eq!(e["error"], "unknown_task");

    let first = run(&["evaluate"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let csv1 = std::fs::read(d.join("run/reports/evaluation.csv")).unwrap();
    let preds1 = std::fs::read(d.join("run/reports/predictions.csv")).unwrap();
    let second = run(&["evaluate"]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(csv1, std::fs::read(d.join("run/reports/evaluation.csv")).unwrap());
    assert_eq!(preds1, std::fs::read(d.join("run/reports/predictions.csv")).unwrap());
    assert!(String::from_utf8_lossy(&csv1).starts_with("task_id,n,accuracy,cancer_accuracy"));

    let bag = "run/datasets/breast_metastasis/images/bag0_0000";
    let out = run(&["predict", "--task", "breast_metastasis", "--input", bag]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["retrieved_task_id"], "breast_metastasis");
    assert!(v["attention"].as_array().unwrap().len() >= 4);
    let e = error_json(&run(&["predict", "--input", bag]));
    assert_eq!(e["error"], "invalid_input");

    let out = run(&["audit-prompts", "--prompt-mode", "organ_only"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
    let out = run(&["audit-forgetting"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 changed"));
    let out = run(&["export-heatmap", "--task", "breast_metastasis", "--bag", "bag0_0000"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let scores: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!(scores.contains(&1.0) && scores.contains(&0.0));
    let e = error_json(&run(&["export-heatmap", "--task", "lung_subtype", "--bag", "bag0_0000"]));
    assert_eq!(e["error"], "invalid_input");

    let store_before = std::fs::read(d.join("run/store/manifest.json")).unwrap();
    let out = run(&["bench", "--epochs", "1"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("storage ratio"));
    assert_eq!(store_before, std::fs::read(d.join("run/store/manifest.json")).unwrap());
}
