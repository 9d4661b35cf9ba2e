use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small 2D run
dataset.kind=points2d
dataset.concepts=a,b,c
dataset.main=a
dataset.general_size=300
dataset.sensitive_fraction=0.01
dataset.noise_std=0.3
model.width=24
model.embed_dim=4
pretrain.steps=150
pretrain.lr=0.1
pretrain.batch=32
finetune.steps=30
finetune.batch=3
eval.samples=32
eval.grid=8
eval.leakage_pool=400
eval.amplification_n=1,5
attack.steps=5
attack.draws=4
attack.eval_samples=8
";

fn selgrad(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_selgrad"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn suite_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = selgrad(dir.path(), &["suite"]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("stage.attack") && stdout.contains("pretrain"), "{stdout}");
    let out = dir.path().join("out");
    for f in ["summary.csv", "metrics.csv", "leakage.csv", "checkpoints/projected.sgrd", "plots/loss_curves.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    fs::remove_dir_all(out.join("plots")).unwrap();
    ok(&selgrad(dir.path(), &["report"]));
    assert!(out.join("plots/amplification.svg").exists());
}

#[test]
fn stage_verbs_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&selgrad(dir.path(), &["synth"]));
    assert!(fs::read_to_string(out.join("sensitive.csv")).unwrap().starts_with("label,x0,x1"));
    ok(&selgrad(dir.path(), &["pretrain"]));
    ok(&selgrad(dir.path(), &["finetune", "--mode", "naive"]));
    ok(&selgrad(dir.path(), &["finetune", "--mode", "projected"]));
    assert!(out.join("projection.csv").exists());
    ok(&selgrad(dir.path(), &["attack"]));
    assert!(out.join("attack.csv").exists());
    ok(&selgrad(dir.path(), &["leakage"]));
    let leak = fs::read_to_string(out.join("leakage.csv")).unwrap();
    assert_eq!(leak.lines().count(), 4, "{leak}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["suite", "--set", "no.such=1"][..],
        &["suite", "--set", "model.width=zero"],
        &["finetune", "--mode", "sideways"],
    ] {
        let o = selgrad(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let missing = Command::new(env!("CARGO_BIN_EXE_selgrad")).args(["suite", "--config", "/nonexistent.cfg"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = selgrad(dir.path(), &["attack"]);
    assert_eq!(o.status.code(), Some(1));
}
