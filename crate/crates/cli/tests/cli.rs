//! End-to-end tests of the `procal` binary: artifact schemas, exit
//! codes, determinism, and strict config parsing.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_procal")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env("PROCAL_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "dataset": {
    "gaussian": {
      "classes": 3, "dim": 2, "n_per_class": 25, "cluster_std": 0.15,
      "shift": { "rotation": 0.5, "translation": [0.25, -0.15], "noise_std": 0.08 },
      "seed": 5
    }
  },
  "model": { "hidden_dim": 12, "feature_dim": 6 },
  "pretrain": { "epochs": 60, "seed": 1 },
  "adaptation": { "epochs": 4, "batch_size": 16, "k": 3, "unnormalized_diversity": true, "seed": 1 },
  "ablation_seeds": [0, 1],
  "out_dir": "out"
}"#,
    )
    .expect("config written");
    path
}

#[test]
fn pretrain_adapt_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);

    let pre = run(&["pretrain", "--config", "config.json"], dir);
    assert!(pre.status.success(), "pretrain: {}", String::from_utf8_lossy(&pre.stderr));
    assert!(dir.join("out/checkpoint_source.json").exists());
    let source_eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/source_eval.json")).unwrap())
            .expect("source eval is valid JSON");
    assert!(source_eval["overall_accuracy"].as_f64().unwrap() > 0.8);

    let adapt = run(
        &[
            "adapt",
            "--config",
            "config.json",
            "--checkpoint",
            "out/checkpoint_source.json",
            "--dump-bank",
        ],
        dir,
    );
    assert!(adapt.status.success(), "adapt: {}", String::from_utf8_lossy(&adapt.stderr));
    for artifact in ["checkpoint_adapted.json", "dynamics.csv", "report.json", "bank.csv"] {
        assert!(dir.join("out").join(artifact).exists(), "missing {artifact}");
    }

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/report.json")).unwrap())
            .expect("report is valid JSON");
    assert_eq!(report["objective"], "procal");
    assert!(report["final_accuracy"].is_number());
    assert!(report["forgetting_rate"].is_number());
    assert!(report["supervision"]["completely_incorrect"].is_number());
    assert!(report["supervision"]["partially_incorrect"].is_number());

    let dynamics = std::fs::read_to_string(dir.join("out/dynamics.csv")).unwrap();
    assert!(dynamics.starts_with(
        "iteration,epoch,target_accuracy,forgetting_rate,incorrect_supervision_rate,\
         loss_total,loss_soft,loss_div,gamma_value,beta_value\n"
    ));
    assert!(dynamics.lines().count() > 1);

    let bank = std::fs::read_to_string(dir.join("out/bank.csv")).unwrap();
    assert!(bank.starts_with("sample_id,neighbor_ids,prior_0"));

    let eval = run(
        &["eval", "--config", "config.json", "--checkpoint", "out/checkpoint_adapted.json"],
        dir,
    );
    assert!(eval.status.success());
    let parsed: serde_json::Value =
        serde_json::from_slice(&eval.stdout).expect("eval output is valid JSON");
    assert!(parsed["confusion"].is_array());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);

    let mut artifacts: Vec<Vec<u8>> = Vec::new();
    for out in ["a", "b"] {
        let pre = run(&["pretrain", "--config", "config.json", "--out", out], dir);
        assert!(pre.status.success());
        let adapt = run(
            &[
                "adapt",
                "--config",
                "config.json",
                "--out",
                out,
                "--checkpoint",
                &format!("{out}/checkpoint_source.json"),
            ],
            dir,
        );
        assert!(adapt.status.success());
        for name in ["checkpoint_source.json", "checkpoint_adapted.json", "dynamics.csv", "report.json"] {
            artifacts.push(std::fs::read(dir.join(out).join(name)).unwrap());
        }
    }
    let (first, second) = artifacts.split_at(4);
    for (a, b) in first.iter().zip(second) {
        assert_eq!(a, b, "rerun artifacts differ");
    }
}

#[test]
fn missing_dataset_file_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.json"),
        r#"{ "dataset": { "feature_tables": { "source": "nope/source.csv", "target": "nope/target.csv" } } }"#,
    )
    .unwrap();
    let out = run(&["pretrain", "--config", "config.json"], dir);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope/source.csv"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.json"),
        r#"{ "dataset": { "gaussian": {} }, "adaptation": { "epochs": 1, "learning_rate": 0.1 } }"#,
    )
    .unwrap();
    let out = run(&["pretrain", "--config", "config.json"], dir);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["pretrain", "--config", "absent.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn oracles_pass_and_scale_with_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["oracles", "--trials", "2"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches(" PASS ").count(), 9, "stdout: {stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn fixed_point_check_emits_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run(
        &["fixed-point-check", "--trials", "25", "--out", "fp.csv"],
        dir,
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.join("fp.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial,C,gamma,simplex_residual,stationarity_residual,feasible"
    );
    assert_eq!(csv.lines().count(), 26);
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(fields[3].parse::<f64>().unwrap() <= 1e-12);
        assert!(fields[4].parse::<f64>().unwrap() <= 1e-10);
        assert!(matches!(fields[5], "true" | "false"));
    }
}

#[test]
fn ablate_writes_rows_for_all_variants_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    let out = run(&["ablate", "--config", "config.json"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("out/ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,accuracy\n"));
    // 2 seeds x 7 variants.
    assert_eq!(csv.lines().count(), 15);
    let again = run(&["ablate", "--config", "config.json", "--out", "again"], dir);
    assert!(again.status.success());
    let csv2 = std::fs::read_to_string(dir.join("again/ablation.csv")).unwrap();
    assert_eq!(csv, csv2, "ablation output is deterministic");
}

#[test]
fn gen_data_round_trips_through_feature_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    let gen = run(&["gen-data", "--config", "config.json", "--out", "data"], dir);
    assert!(gen.status.success());

    // Re-point the config at the generated tables and run the pipeline.
    std::fs::write(
        dir.join("tables.json"),
        r#"{
  "dataset": { "feature_tables": { "source": "data/source.csv", "target": "data/target.csv" } },
  "model": { "hidden_dim": 12, "feature_dim": 6 },
  "pretrain": { "epochs": 10, "seed": 1 },
  "adaptation": { "epochs": 1, "batch_size": 16, "k": 3 },
  "out_dir": "out2"
}"#,
    )
    .unwrap();
    let pre = run(&["pretrain", "--config", "tables.json"], dir);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));
    assert!(dir.join("out2/checkpoint_source.json").exists());
}

#[test]
fn export_features_writes_feature_dim_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    let pre = run(&["pretrain", "--config", "config.json"], dir);
    assert!(pre.status.success());
    let exp = run(
        &[
            "export-features",
            "--config",
            "config.json",
            "--checkpoint",
            "out/checkpoint_source.json",
            "--domain",
            "source",
        ],
        dir,
    );
    assert!(exp.status.success(), "{}", String::from_utf8_lossy(&exp.stderr));
    let table = std::fs::read_to_string(dir.join("out/features_source.csv")).unwrap();
    assert!(table.starts_with("#meta,C=3,d=6\n"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    let a = run(&["pretrain", "--config", "config.json", "--out", "s1", "--seed", "7"], dir);
    let b = run(&["pretrain", "--config", "config.json", "--out", "s2", "--seed", "8"], dir);
    assert!(a.status.success() && b.status.success());
    let ca = std::fs::read(dir.join("s1/checkpoint_source.json")).unwrap();
    let cb = std::fs::read(dir.join("s2/checkpoint_source.json")).unwrap();
    assert_ne!(ca, cb, "different seeds must change the checkpoint");
}

#[test]
fn quiet_log_level_suppresses_progress() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    let out = Command::new(bin())
        .args(["pretrain", "--config", "config.json"])
        .current_dir(dir)
        .env("PROCAL_LOG", "quiet")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stderr.is_empty(), "quiet run produced: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_benchmark_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs_rot60.json");
    let parsed = procal_cli::config::ExperimentConfig::load(&path).expect("shipped config loads");
    assert_eq!(parsed, procal_cli::config::ExperimentConfig::blobs_rot60());
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.json"),
        r#"{
  "dataset": { "gaussian": { "classes": 3, "dim": 2, "n_per_class": 20, "cluster_std": 0.15, "seed": 3 } },
  "model": { "hidden_dim": 12, "feature_dim": 6 },
  "pretrain": { "epochs": 20 },
  "adaptation": { "epochs": 2, "batch_size": 16, "k": 3, "lr_base": 1e300, "lr_head": 1e300 },
  "out_dir": "out"
}"#,
    )
    .unwrap();
    let pre = run(&["pretrain", "--config", "config.json"], dir);
    assert!(pre.status.success());
    let blown = run(
        &["adapt", "--config", "config.json", "--checkpoint", "out/checkpoint_source.json"],
        dir,
    );
    assert_eq!(blown.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&blown.stderr).contains("divergence"));

    // Pretraining blows up through an infinite cross-entropy loss.
    std::fs::write(
        dir.join("hot.json"),
        r#"{
  "dataset": { "gaussian": { "classes": 3, "dim": 2, "n_per_class": 20, "cluster_std": 0.15, "seed": 3 } },
  "model": { "hidden_dim": 12, "feature_dim": 6 },
  "pretrain": { "epochs": 5, "lr_base": 1e25, "lr_head": 1e25 },
  "out_dir": "out_hot"
}"#,
    )
    .unwrap();
    let hot = run(&["pretrain", "--config", "hot.json"], dir);
    assert_eq!(hot.status.code(), Some(3));
}
