//! Command-level integration tests on a miniature configuration.

use std::path::Path;

use tpkd_cli::commands::{cmd_bench, cmd_eval, cmd_extract_pi, cmd_gen_data, cmd_train, Role};
use tpkd_cli::config::ExperimentConfig;
use tpkd_cli::manifest::{file_sha256, RunManifest};
use tpkd_cli::CliError;

fn mini_config(out_dir: &Path) -> ExperimentConfig {
    let overrides = vec![
        "epochs=2".to_string(),
        "seeds=[301,302]".to_string(),
        "batch_size=8".to_string(),
        "data.classes=2".to_string(),
        "data.train_per_class=16".to_string(),
        "data.val_per_class=4".to_string(),
        "data.test_per_class=4".to_string(),
        "data.channels=1".to_string(),
        "data.length=64".to_string(),
        "pi.resolution=8".to_string(),
        "teacher1.width=[4,8]".to_string(),
        "teacher1.stages=2".to_string(),
        "teacher1.channels_in=1".to_string(),
        "teacher1.classes=2".to_string(),
        "teacher2.width=[4,8]".to_string(),
        "teacher2.stages=2".to_string(),
        "teacher2.channels_in=1".to_string(),
        "teacher2.classes=2".to_string(),
        "student.width=[3,6]".to_string(),
        "student.stages=2".to_string(),
        "student.channels_in=1".to_string(),
        "student.classes=2".to_string(),
        "distill.k=2".to_string(),
        "distill.beta=1.0".to_string(),
        "distill.layer_pairs=[[0,0,0],[1,1,1]]".to_string(),
    ];
    let mut cfg = ExperimentConfig::load(None, &overrides).unwrap();
    cfg.out_dir = out_dir.to_path_buf();
    cfg
}

fn hash_dir_files(dir: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .map(|n| file_sha256(&dir.join(n)).unwrap())
        .collect()
}

#[test]
fn pipeline_runs_all_roles_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = mini_config(&tmp.path().join("run"));

    // gen-data creates the missing output directory
    cmd_gen_data(&cfg, false).unwrap();
    let data_files = ["data/train.bin", "data/val.bin", "data/test.bin"];
    let first = hash_dir_files(&cfg.out_dir, &data_files);

    // a second run is a no-op; hashes unchanged
    cmd_gen_data(&cfg, false).unwrap();
    assert_eq!(first, hash_dir_files(&cfg.out_dir, &data_files));

    // the same config in a fresh directory produces identical file hashes
    let cfg2 = mini_config(&tmp.path().join("run2"));
    cmd_gen_data(&cfg2, false).unwrap();
    assert_eq!(first, hash_dir_files(&cfg2.out_dir, &data_files));

    cmd_extract_pi(&cfg, false).unwrap();
    let pi_files = ["data/pi-train.bin", "data/pi-val.bin", "data/pi-test.bin"];
    let pi_first = hash_dir_files(&cfg.out_dir, &pi_files);
    cmd_extract_pi(&cfg, true).unwrap(); // forced re-extraction, same bytes
    assert_eq!(pi_first, hash_dir_files(&cfg.out_dir, &pi_files));

    // PI labels align index-for-index with the series labels
    let series = tpkd_core::data::load_dataset(&cfg.data_path("train")).unwrap();
    let pi = tpkd_core::data::load_pi_dataset(&cfg.pi_path("train")).unwrap();
    assert_eq!(series.labels(), pi.labels);

    // teachers before students
    cmd_train(&cfg, Role::Teacher1, false).unwrap();
    cmd_train(&cfg, Role::Teacher2, false).unwrap();
    cmd_train(&cfg, Role::Scratch, false).unwrap();
    for role in [
        Role::StudentKd,
        Role::StudentBase,
        Role::StudentAnn,
        Role::StudentTpkd,
        Role::StudentTpkdNoorth,
    ] {
        cmd_train(&cfg, role, false).unwrap();
    }
    for seed in [301u64, 302] {
        for role in ["scratch", "student-kd", "student-base", "student-ann", "student-tpkd", "student-tpkd-noorth"] {
            assert!(cfg.ckpt_path(&format!("{role}-s{seed}.best")).exists(), "{role} seed {seed}");
            assert!(cfg.history_path(&format!("{role}-s{seed}")).exists());
        }
    }

    // manifest knows every phase is complete; re-training is a no-op
    let manifest = RunManifest::load(&cfg.out_dir);
    assert!(manifest.phases.contains_key("train-teacher1"));
    let before = file_sha256(&cfg.out_dir.join("manifest.json")).unwrap();
    cmd_train(&cfg, Role::StudentTpkd, false).unwrap();
    assert_eq!(before, file_sha256(&cfg.out_dir.join("manifest.json")).unwrap());

    // eval: clean report equals a (0, 0)-corruption report
    let ckpt = cfg.ckpt_path("student-tpkd-s301.best");
    let clean = cmd_eval(&cfg, &ckpt, 0, 1, None).unwrap();
    let zero = cmd_eval(&cfg, &ckpt, 0, 999, None).unwrap();
    assert_eq!(clean.report.accuracy, zero.report.accuracy);
    assert_eq!(clean.report.confusion, zero.report.confusion);
    // corrupted eval still works and stays in range
    let l3 = cmd_eval(&cfg, &ckpt, 3, 1, None).unwrap();
    assert!((0.0..=1.0).contains(&l3.report.accuracy));

    // bench produces the three-row table
    let rows = cmd_bench(&cfg, None).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.samples == 8));
    assert!(cfg.out_dir.join("bench/timings.csv").exists());

    // analyze emits per-stage pearson histograms and CKA matrices
    tpkd_cli::commands::cmd_analyze(&cfg, None).unwrap();
    assert!(cfg.out_dir.join("analyze/pearson-stage0.csv").exists());
    assert!(cfg.out_dir.join("analyze/cka-teacher1.csv").exists());
    assert!(cfg.out_dir.join("analyze/cka-teacher2.csv").exists());
}

#[test]
fn annealed_student_with_zero_epochs_equals_scratch_final() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(&tmp.path().join("run"));
    cfg.seeds = vec![301];
    cmd_gen_data(&cfg, false).unwrap();
    cmd_extract_pi(&cfg, false).unwrap();
    cmd_train(&cfg, Role::Teacher1, false).unwrap();
    cmd_train(&cfg, Role::Teacher2, false).unwrap();
    cmd_train(&cfg, Role::Scratch, false).unwrap();

    let mut cfg0 = cfg.clone();
    cfg0.epochs = 0;
    cmd_train(&cfg0, Role::StudentAnn, false).unwrap();
    let ann = file_sha256(&cfg.ckpt_path("student-ann-s301.best")).unwrap();
    let scratch = file_sha256(&cfg.ckpt_path("scratch-s301.final")).unwrap();
    assert_eq!(ann, scratch);
}

#[test]
fn base_with_alpha_one_matches_kd_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(&tmp.path().join("run"));
    cfg.seeds = vec![301];
    cfg.distill.alpha = 1.0;
    cmd_gen_data(&cfg, false).unwrap();
    cmd_extract_pi(&cfg, false).unwrap();
    cmd_train(&cfg, Role::Teacher1, false).unwrap();
    cmd_train(&cfg, Role::Teacher2, false).unwrap();
    cmd_train(&cfg, Role::StudentKd, false).unwrap();
    cmd_train(&cfg, Role::StudentBase, false).unwrap();
    let kd = tpkd_core::container::Checkpoint::load(&cfg.ckpt_path("student-kd-s301.final")).unwrap();
    let base =
        tpkd_core::container::Checkpoint::load(&cfg.ckpt_path("student-base-s301.final")).unwrap();
    assert_eq!(kd.entries, base.entries);
}

#[test]
fn missing_prerequisites_are_reported_as_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = mini_config(&tmp.path().join("run"));
    match cmd_train(&cfg, Role::Teacher1, false) {
        Err(e @ CliError::MissingArtifact(_)) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected MissingArtifact, got {:?}", other.err()),
    }
    match cmd_eval(&cfg, &cfg.ckpt_path("nope.best"), 0, 1, None) {
        Err(e @ CliError::MissingArtifact(_)) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected MissingArtifact, got {:?}", other.map(|_| ()).err()),
    }
}

#[test]
fn bench_handles_empty_test_split() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(&tmp.path().join("run"));
    cfg.seeds = vec![301];
    cfg.data.test_per_class = 0;
    cmd_gen_data(&cfg, false).unwrap();
    cmd_extract_pi(&cfg, false).unwrap();
    cmd_train(&cfg, Role::Teacher1, false).unwrap();
    cmd_train(&cfg, Role::Teacher2, false).unwrap();
    cmd_train(&cfg, Role::Scratch, false).unwrap();
    cmd_train(&cfg, Role::StudentTpkd, false).unwrap();
    let rows = cmd_bench(&cfg, None).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.samples == 0 && r.per_sample_ms == 0.0));
}

#[test]
fn invalid_config_is_exit_code_two() {
    let err = ExperimentConfig::load(None, &["data.classes=1".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = ExperimentConfig::load(None, &["batch_size=10".into(), "distill.k=4".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
