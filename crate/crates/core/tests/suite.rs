use std::fs;
use std::path::Path;

use selgrad::experiments::config::ExperimentConfig;
use selgrad::experiments::suite::{run_experiment_suite, summary_csv, write_run_report, StageStatus};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(
        "dataset.kind=points2d\n\
         dataset.concepts=a,b,c\n\
         dataset.main=a\n\
         dataset.feature=mark\n\
         dataset.general_size=300\n\
         dataset.sensitive_fraction=0.01\n\
         dataset.noise_std=0.3\n\
         model.width=24\n\
         model.embed_dim=4\n\
         pretrain.steps=150\n\
         pretrain.lr=0.1\n\
         pretrain.batch=32\n\
         finetune.steps=30\n\
         finetune.batch=3\n\
         eval.samples=32\n\
         eval.grid=8\n\
         eval.leakage_pool=400\n\
         eval.amplification_n=1,5\n\
         attack.steps=5\n\
         attack.draws=4\n\
         attack.eval_samples=8\n",
    )
    .unwrap();
    cfg
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn tiny_suite_runs_every_stage() {
    let report = run_experiment_suite(&tiny()).unwrap();
    for (stage, status) in &report.stages {
        assert_eq!(*status, StageStatus::Done, "{stage}");
    }
    for v in ["pretrained", "naive", "projected"] {
        let m = report.metric(v).unwrap();
        assert!((0.0..=1.0).contains(&m.copy_score), "{v}");
        assert!((0.0..=1.0).contains(&m.concept_fidelity), "{v}");
    }
    assert_eq!(report.projected_matches_naive(), Some(false));
    assert_eq!(report.leakage.len(), 3);
    assert_eq!(report.attacks.len(), 1);
    assert!(!report.is_empty());
}

#[test]
fn repeated_runs_write_identical_csvs() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_run_report(&run_experiment_suite(&cfg).unwrap(), a.path()).unwrap();
    write_run_report(&run_experiment_suite(&cfg).unwrap(), b.path()).unwrap();
    let (ca, cb) = (csvs(a.path()), csvs(b.path()));
    assert!(ca.len() >= 8);
    assert_eq!(ca, cb);
}

#[test]
fn zero_strength_projection_matches_naive() {
    let mut cfg = tiny();
    cfg.set("projection.lambda", "0").unwrap();
    let report = run_experiment_suite(&cfg).unwrap();
    assert_eq!(report.projected_matches_naive(), Some(true));
    assert!(summary_csv(&report).contains("projected_identical_to_naive,true"));
}

#[test]
fn empty_sensitive_split_skips_dependent_stages() {
    let mut cfg = tiny();
    cfg.set("dataset.sensitive_fraction", "0").unwrap();
    let report = run_experiment_suite(&cfg).unwrap();
    assert_eq!(report.status("pretrain"), Some(&StageStatus::Done));
    for stage in ["finetune_naive", "finetune_projected", "leakage", "attack"] {
        assert!(matches!(report.status(stage), Some(StageStatus::Skipped(_))), "{stage}");
    }
    assert!(!report.failed());
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let mut cfg = tiny();
    cfg.model.width = 0;
    assert!(run_experiment_suite(&cfg).is_err());
}
