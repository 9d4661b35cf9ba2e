//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Built with `harness = false`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selgrad::autodiff::finite_diff_check;
use selgrad::diffusion::{Batch, NoiseSchedule};
use selgrad::experiments::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use selgrad::experiments::config::ExperimentConfig;
use selgrad::experiments::suite::{initial_model, prepare_dataset, run_experiment_suite, run_finetune, write_run_report, RunReport, StageStatus};
use selgrad::experiments::train::FinetuneMode;
use selgrad::model::{Model, ModelSpec, ParamScope};
use selgrad::selective::{compute_pair_grads, constrain, loss_and_grad, projected_step, PairedBatch, ProjectionConfig};
use selgrad::tensor::{ParamVector, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `(<θ, g>/|g|)²` over flat vectors, independent of the library helper.
fn capacity_flat(theta: &[f64], g: &[f64]) -> f64 {
    let d = dot(theta, g);
    d * d / dot(g, g)
}

const IDS: [&str; 3] = ["a", "b", "f"];

/// Random small model with a paired batch: main caption `a`, feature caption `a+f`.
fn random_case(rng: &mut ChaCha8Rng) -> (Model, PairedBatch, NoiseSchedule) {
    let spec = ModelSpec { data_dim: rng.random_range(2..6), width: rng.random_range(4..13), embed_dim: rng.random_range(2..6) };
    let sched = NoiseSchedule::linear(rng.random_range(10..40), 1e-4, rng.random_range(0.05..0.3)).unwrap();
    let model = Model::new(spec.clone(), IDS.iter().map(|s| s.to_string()).collect(), rng).unwrap();
    let n = rng.random_range(2..7);
    let pb = random_batch(spec.data_dim, n, &sched, rng);
    (model, pb, sched)
}

fn random_batch(dim: usize, n: usize, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> PairedBatch {
    let x0 = Tensor::randn(&[n, dim], 1.0, rng);
    let b = Batch::draw(x0, vec!["a".into(); n], sched, rng).unwrap();
    PairedBatch { x0: b.x0, main_ids: b.concept_ids, feat_ids: vec!["a+f".into(); n], timesteps: b.timesteps, noise: b.noise }
}

fn exact(rescale: bool, epsilon: f64) -> ProjectionConfig {
    ProjectionConfig { lambda: 1.0, epsilon, eta: 0.05, rescale }
}

/// Orthogonality of the applied update to the feature gradient.
fn orthogonality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut steps, mut worst) = (0usize, 0.0f64);
    while steps < 1000 {
        let (mut m, _, sched) = random_case(&mut rng);
        let dim = m.spec().data_dim;
        for k in 0..25 {
            let pb = random_batch(dim, rng.random_range(2..7), &sched, &mut rng);
            let cfg = exact(k % 2 == 0, 0.0);
            let pair = compute_pair_grads(&m, ParamScope::Full, &pb, &sched).unwrap();
            let Ok(p) = constrain(&pair, &cfg) else { continue };
            let (gp, gf) = (p.g_proj.flatten(), pair.g_feat.flatten());
            worst = worst.max(dot(&gp, &gf).abs() / (norm(&gp) * norm(&gf)));
            projected_step(&mut m, ParamScope::Full, &pb, &sched, &cfg, k, None).unwrap();
            steps += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-9 && secs < 60.0, format!("{steps} steps, max |<g_proj,g_feat>|/(|g_proj||g_feat|) = {worst:.2e}, {secs:.1}s"))
}

/// Central-difference derivative of the feature loss along the update.
fn neutrality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let (mut steps, mut worst) = (0usize, 0.0f64);
    while steps < 100 {
        let (mut m, _, sched) = random_case(&mut rng);
        let dim = m.spec().data_dim;
        for k in 0..10 {
            let pb = random_batch(dim, rng.random_range(2..7), &sched, &mut rng);
            let cfg = exact(false, 0.0);
            let pair = compute_pair_grads(&m, ParamScope::Full, &pb, &sched).unwrap();
            let Ok(p) = constrain(&pair, &cfg) else { continue };
            let theta = m.params(ParamScope::Full);
            let feat = pb.feat_batch().unwrap();
            let loss_at = |s: f64| {
                let mut mm = m.clone();
                mm.set_params(ParamScope::Full, &theta.sub_scaled(&p.g_proj, s).unwrap()).unwrap();
                loss_and_grad(&mm, ParamScope::Full, &feat, &sched).unwrap().0
            };
            // along -g_proj itself and along its unit direction; the stricter counts
            let raw = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let along = raw.abs().max(raw.abs() / p.g_proj.norm());
            worst = worst.max(along / pair.g_feat.norm());
            projected_step(&mut m, ParamScope::Full, &pb, &sched, &cfg, k, None).unwrap();
            steps += 1;
        }
    }
    check(worst <= 1e-3, format!("{steps} steps, max |dL_feat|/|g_feat| = {worst:.2e} at h = {h:e}"))
}

/// Capacity along the step's own feature gradient before and after the update.
fn capacity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 2];
    let mut steps = 0;
    for (i, eps) in [0.0, 1e-8].into_iter().enumerate() {
        let mut n = 0;
        while n < 300 {
            let (mut m, _, sched) = random_case(&mut rng);
            let dim = m.spec().data_dim;
            for k in 0..15 {
                let pb = random_batch(dim, rng.random_range(2..7), &sched, &mut rng);
                let g_feat = compute_pair_grads(&m, ParamScope::Full, &pb, &sched).unwrap().g_feat.flatten();
                let before = m.params(ParamScope::Full).flatten();
                let Ok(r) = projected_step(&mut m, ParamScope::Full, &pb, &sched, &exact(k % 2 == 1, eps), k, None) else { continue };
                let after = m.params(ParamScope::Full).flatten();
                let (mb, ma) = (capacity_flat(&before, &g_feat), capacity_flat(&after, &g_feat));
                let lib_agrees = (r.capacity_before - mb).abs() <= 1e-9 * (1.0 + mb);
                let dev = if eps == 0.0 { (ma - mb).abs() / (1.0 + mb) } else { (ma - mb).abs() };
                worst[i] = worst[i].max(if lib_agrees { dev } else { f64::INFINITY });
                n += 1;
            }
        }
        steps += n;
    }
    check(
        worst[0] <= 1e-9 && worst[1] <= 1e-6,
        format!("{steps} steps, eps=0: max |dM|/(1+M) = {:.2e}; eps=1e-8: max |dM| = {:.2e}", worst[0], worst[1]),
    )
}

/// Analytic DSM gradient against central differences.
fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (m, pb, sched) = random_case(&mut rng);
        let batch = if rng.random_bool(0.5) { pb.main_batch() } else { pb.feat_batch() }.unwrap();
        let loss = |p: &ParamVector| {
            let mut mm = m.clone();
            mm.set_params(ParamScope::Full, p)?;
            loss_and_grad(&mm, ParamScope::Full, &batch, &sched)
        };
        worst = worst.max(finite_diff_check(loss, &m.params(ParamScope::Full), 1e-5).unwrap());
    }
    check(worst <= 1e-4, format!("20 configurations, max relative error {worst:.2e}"))
}

/// λ=0 projected fine-tune against the naive one from the same checkpoint.
fn lambda_zero(single: &RunReport) -> Outcome {
    let mut cfg = single.config.clone();
    cfg.set("projection.lambda", "0").unwrap();
    let data = prepare_dataset(&cfg).unwrap();
    let pre = &single.checkpoint("pretrained").ok_or("no pretrained checkpoint")?.model;
    let (naive, rn) = run_finetune(&cfg, pre, &data, FinetuneMode::Naive).unwrap();
    let (proj, rp) = run_finetune(&cfg, pre, &data, FinetuneMode::Projected).unwrap();
    let same_params = naive.model == proj.model;
    let same_bytes = naive.model.params(ParamScope::Full).checksum() == proj.model.params(ParamScope::Full).checksum();
    let same_losses = rn.losses.iter().map(|l| l.to_bits()).eq(rp.losses.iter().map(|l| l.to_bits()));
    check(
        same_params && same_bytes && same_losses,
        format!("{} steps, parameters identical: {same_params}, loss traces identical: {same_losses}", rn.losses.len()),
    )
}

fn stages_done(r: &RunReport) -> Result<(), String> {
    match r.stages.iter().find(|(_, s)| *s != StageStatus::Done) {
        Some((name, s)) => Err(format!("stage {name} {s}")),
        None => Ok(()),
    }
}

fn copy_and_fidelity(r: &RunReport) -> Result<(f64, f64, f64, f64), String> {
    let n = r.metric("naive").ok_or("no naive metrics")?;
    let p = r.metric("projected").ok_or("no projected metrics")?;
    Ok((n.copy_score, p.copy_score, n.concept_fidelity, p.concept_fidelity))
}

fn single_sample(r: &RunReport, elapsed: Duration) -> Outcome {
    stages_done(r)?;
    let (cn, cp, fnv, fp) = copy_and_fidelity(r)?;
    let drop = (cn - cp) / cn;
    let fid = (fp - fnv).abs() / fnv;
    let secs = elapsed.as_secs_f64();
    check(
        r.config.dataset.sensitive_count() == 1 && cn >= 0.95 && drop >= 0.10 && fid <= 0.05 && secs < 300.0,
        format!("copy naive {cn:.4} projected {cp:.4} ({:.1}% lower), fidelity {fnv:.4} vs {fp:.4} ({:.1}% apart), {secs:.1}s", drop * 100.0, fid * 100.0),
    )
}

fn multi_sample(r: &RunReport, elapsed: Duration) -> Outcome {
    stages_done(r)?;
    let (cn, cp, fnv, fp) = copy_and_fidelity(r)?;
    let fid = (fp - fnv).abs() / fnv;
    let secs = elapsed.as_secs_f64();
    let count = r.config.dataset.sensitive_count();
    check(
        count >= 80 && cp < cn && fid <= 0.05 && secs < 900.0,
        format!("{count} samples, copy naive {cn:.4} projected {cp:.4}, fidelity {fnv:.4} vs {fp:.4} ({:.1}% apart), {secs:.1}s", fid * 100.0),
    )
}

fn leakage(runs: &[&RunReport]) -> Outcome {
    let (mut models, mut rows, mut worst_gap) = (0, 0, f64::INFINITY);
    let mut fails = Vec::new();
    for r in runs {
        if r.config.eval.grid != 32 {
            return Err(format!("grid {} is not 32", r.config.eval.grid));
        }
        if r.leakage.len() < 3 {
            return Err(format!("only {} models checked", r.leakage.len()));
        }
        for (stage, l) in &r.leakage {
            let gap = l.model_mass - (l.alpha - l.delta - 3.0 * l.mc_stderr);
            worst_gap = worst_gap.min(gap);
            if gap < 0.0 {
                fails.push(format!("{stage} bound"));
            }
            models += 1;
        }
        let ns: Vec<usize> = r.amplification.iter().filter(|(s, _)| s == "pretrained").map(|(_, a)| a.n).collect();
        if ns != [1, 5, 20, 100] {
            return Err(format!("amplification N = {ns:?}"));
        }
        for (stage, a) in &r.amplification {
            // binomial stderr of the group hit rate, from the observed and the predicted rate
            let trials = (r.config.eval.leakage_pool / a.n) as f64;
            let se = a.stderr.max((a.closed_form * (1.0 - a.closed_form) / trials).sqrt());
            if (a.empirical - a.closed_form).abs() > f64::max(0.05, 3.0 * se) {
                fails.push(format!("{stage} N={}", a.n));
            }
            rows += 1;
        }
    }
    check(fails.is_empty(), format!("{models} models, min slack {worst_gap:.4}; {rows} amplification rows within tolerance; failures {fails:?}"))
}

fn adversarial(runs: &[&RunReport]) -> Outcome {
    let mut pairs = Vec::new();
    for r in runs {
        if r.attacks.is_empty() {
            return Err("no attack results".into());
        }
        pairs.extend(r.attacks.iter().map(|a| (a.naive.final_copy_score, a.projected.final_copy_score)));
    }
    let ok = pairs.iter().all(|(n, p)| p < n);
    let shown: Vec<String> = pairs.iter().map(|(n, p)| format!("naive {n:.4} projected {p:.4}")).collect();
    check(ok, shown.join("; "))
}

fn persistence(single: &RunReport) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cps = single.checkpoints.clone();
    let cfg = &single.config;
    cps.insert(0, Checkpoint { stage: "init".into(), model: initial_model(cfg).unwrap(), schedule: cfg.schedule.clone(), rng: None });
    let mut adapted = cfg.clone();
    adapted.apply_text("model.adapter_rank=2\nfinetune.steps=5\nmodel.adapter_layers=l3,l1\n").unwrap();
    let data = prepare_dataset(&adapted).unwrap();
    let pre = &single.checkpoint("pretrained").ok_or("no pretrained checkpoint")?.model;
    let (mut lora, _) = run_finetune(&adapted, pre, &data, FinetuneMode::Projected).unwrap();
    lora.stage = "adapters".into();
    cps.push(lora);
    for cp in &cps {
        let path = dir.path().join(format!("{}.sgrd", cp.stage));
        save_checkpoint(&path, cp).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        if back != *cp || back.to_bytes() != fs::read(&path).unwrap() {
            return Err(format!("{} did not round-trip", cp.stage));
        }
    }
    let bytes = cps[1].to_bytes();
    let p = Path::new("corrupt.sgrd");
    let mut diagnostics = Vec::new();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x40;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    for (what, b) in [("bit flip", flipped), ("truncated", bytes[..bytes.len() - 9].to_vec()), ("bad magic", bad_magic), ("empty", Vec::new())] {
        match Checkpoint::from_bytes(&b, p) {
            Ok(_) => return Err(format!("{what} file accepted")),
            Err(e) if e.to_string().contains("corrupt.sgrd") => diagnostics.push(what),
            Err(e) => return Err(format!("{what}: diagnostic lacks the path: {e}")),
        }
    }
    Ok(format!("{} stages byte-identical after save/load; rejected {}", cps.len(), diagnostics.join(", ")))
}

fn report_csvs(r: &RunReport) -> Result<Vec<(String, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_run_report(r, dir.path()).map_err(|e| e.to_string())?;
    let mut out: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    Ok(out)
}

fn reproducibility(single: &RunReport) -> Outcome {
    let again = run_experiment_suite(&single.config).map_err(|e| e.to_string())?;
    let (a, b) = (report_csvs(single)?, report_csvs(&again)?);
    let differ: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    check(a.len() == b.len() && a.len() >= 10 && differ.is_empty(), format!("{} CSVs compared, differing: {differ:?}", a.len()))
}

fn timed_suite(cfg: &ExperimentConfig) -> (Result<RunReport, String>, Duration) {
    let t = Instant::now();
    let r = run_experiment_suite(cfg).map_err(|e| e.to_string());
    (r, t.elapsed())
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --nocapture; none apply here
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, o));
    };
    record("1 orthogonality", orthogonality());
    record("2 first-order neutrality", neutrality());
    record("3 capacity invariance", capacity());
    record("4 gradient correctness", gradient_correctness());

    let single_cfg = ExperimentConfig::default();
    let mut multi_cfg = ExperimentConfig::default();
    multi_cfg.set("dataset.sensitive_fraction", "0.04").unwrap();
    let (single, single_time) = timed_suite(&single_cfg);
    let (multi, multi_time) = timed_suite(&multi_cfg);

    match &single {
        Ok(s) => record("5 lambda-zero equivalence", lambda_zero(s)),
        Err(e) => record("5 lambda-zero equivalence", Err(e.clone())),
    }
    record("6 single-sample A/B", single.as_ref().map_err(Clone::clone).and_then(|s| single_sample(s, single_time)));
    record("7 multi-sample A/B", multi.as_ref().map_err(Clone::clone).and_then(|m| multi_sample(m, multi_time)));
    let both = match (&single, &multi) {
        (Ok(s), Ok(m)) => Ok(vec![s, m]),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    record("8 leakage bound and amplification", both.clone().and_then(|b| leakage(&b)));
    record("9 adversarial A/B", both.and_then(|b| adversarial(&b)));
    record("10 persistence", single.as_ref().map_err(Clone::clone).and_then(persistence));
    record("11 reproducibility", single.as_ref().map_err(Clone::clone).and_then(reproducibility));

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
