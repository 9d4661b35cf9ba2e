//! Stage pipeline and the full experiment suite.
//!
//! Stages run in order: dataset, probe, pretrain, naive and projected
//! fine-tunes, evaluation, leakage, attack. A failing stage is recorded and
//! every stage that depends on it is marked skipped with the reason.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::attack::{attack_ab_compare, AttackComparison, AttackConfig, AttackInit, SURROGATE_LABEL};
use crate::diffusion::{sample, Conditioning, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{calibrate_probe, concept_fidelity, copy_score, FeatureMap, ProbeClassifier, ProtectedSet};
use crate::experiments::checkpoint::{Checkpoint, RngState};
use crate::experiments::config::{AttackStart, ExperimentConfig};
use crate::experiments::data::{synthesize_dataset, Dataset};
use crate::experiments::train::{finetune, init_model, pretrain, stream_rng, streams, FinetuneMode, FinetuneResult};
use crate::leakage::{
    hit_rate_from_pool, verify_leakage_theorem, AmplificationRow, ConceptSet, Grid2d, LeakageReport, AMPLIFICATION_CSV_HEADER,
    LEAKAGE_CSV_HEADER,
};
use crate::model::{ConceptTable, Model};
use crate::selective::write_reports_csv;
use crate::tensor::Tensor;

/// Seed of the fixed projection used to view high-dimensional data in 2-D.
pub const VIEW_SEED: u64 = 0x0071_e32d;

#[derive(Clone, Debug, PartialEq)]
pub enum StageStatus {
    Done,
    Failed(String),
    Skipped(String),
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageStatus::Done => f.write_str("done"),
            StageStatus::Failed(r) => write!(f, "failed: {r}"),
            StageStatus::Skipped(r) => write!(f, "skipped: {r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub copy_score: f64,
    pub concept_fidelity: f64,
}

pub const METRICS_CSV_HEADER: &str = "variant,copy_score,concept_fidelity";

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub stages: Vec<(String, StageStatus)>,
    pub probe_accuracy: Option<f64>,
    pub pretrain_losses: Vec<f64>,
    pub naive: Option<FinetuneResult>,
    pub projected: Option<FinetuneResult>,
    /// Checkpoints in stage order: pretrained, naive, projected.
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRow>,
    pub leakage: Vec<(String, LeakageReport)>,
    pub amplification: Vec<(String, AmplificationRow)>,
    pub attacks: Vec<AttackComparison>,
    /// 2-D view of protected and generated samples, tagged by source.
    pub scatter: Vec<(String, [f64; 2])>,
    /// Wall-clock seconds per stage. Never written to the CSVs.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    fn new(config: ExperimentConfig) -> Self {
        RunReport {
            config,
            stages: Vec::new(),
            probe_accuracy: None,
            pretrain_losses: Vec::new(),
            naive: None,
            projected: None,
            checkpoints: Vec::new(),
            metrics: Vec::new(),
            leakage: Vec::new(),
            amplification: Vec::new(),
            attacks: Vec::new(),
            scatter: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn status(&self, stage: &str) -> Option<&StageStatus> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, st)| st)
    }

    pub fn failed(&self) -> bool {
        self.stages.iter().any(|(_, s)| matches!(s, StageStatus::Failed(_)))
    }

    pub fn metric(&self, variant: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.variant == variant)
    }

    pub fn checkpoint(&self, stage: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.stage == stage)
    }

    /// True when both fine-tunes produced bit-identical parameters.
    pub fn projected_matches_naive(&self) -> Option<bool> {
        let n = self.checkpoint("naive")?;
        let p = self.checkpoint("projected")?;
        Some(n.model == p.model)
    }

    pub fn is_empty(&self) -> bool {
        self.pretrain_losses.is_empty()
            && self.naive.is_none()
            && self.projected.is_none()
            && self.amplification.is_empty()
            && self.scatter.is_empty()
    }
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    synthesize_dataset(&cfg.dataset)
}

/// Fresh model with the feature concept's row rescaled.
pub fn initial_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut m = init_model(cfg.model_spec(), cfg.dataset.all_concepts(), cfg.seed)?;
    let row = m.concepts.index_of(&cfg.dataset.feature_concept)?;
    let e = m.concepts.embed_dim();
    let mut table = m.concepts.table().clone();
    for v in &mut table.data_mut()[row * e..(row + 1) * e] {
        *v *= cfg.model.feature_embed_scale;
    }
    m.concepts = ConceptTable::from_parts(m.concepts.ids().to_vec(), table)?;
    Ok(m)
}

/// Plain DSM pretraining from the seeded initialization.
pub fn run_pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Checkpoint, Vec<f64>)> {
    let mut model = initial_model(cfg)?;
    let mut rng = stream_rng(cfg.seed, streams::PRETRAIN);
    let losses = pretrain(&mut model, &data.general, &cfg.schedule.build()?, &cfg.pretrain, &mut rng)?;
    let cp = Checkpoint { stage: "pretrained".into(), model, schedule: cfg.schedule.clone(), rng: Some(RngState::capture(&rng)) };
    Ok((cp, losses))
}

/// Fine-tunes a copy of `pretrained` on the sensitive split. Both modes use
/// the same adapter initialization and fine-tune stream.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    pretrained: &Model,
    data: &Dataset,
    mode: FinetuneMode,
) -> Result<(Checkpoint, FinetuneResult)> {
    let mut model = pretrained.clone();
    if cfg.model.adapter_rank > 0 {
        let layers: Vec<&str> = cfg.model.adapter_layers.iter().map(String::as_str).collect();
        model.denoiser.attach_adapters(cfg.model.adapter_rank, &layers, &mut stream_rng(cfg.seed, streams::ADAPTERS))?;
    }
    let mut rng = stream_rng(cfg.seed, streams::FINETUNE);
    let result = finetune(
        &mut model,
        cfg.model.scope(),
        &data.sensitive,
        &cfg.schedule.build()?,
        &cfg.finetune,
        mode,
        &cfg.projection_config(),
        &mut rng,
    )?;
    let cp = Checkpoint { stage: mode.to_string(), model, schedule: cfg.schedule.clone(), rng: Some(RngState::capture(&rng)) };
    Ok((cp, result))
}

pub fn protected_set(data: &Dataset) -> Result<ProtectedSet> {
    ProtectedSet::new(data.sensitive.samples.tensor()?, data.sensitive.samples.labels.clone())
}

/// Samples under the main caption, as used for every metric.
pub fn generate_main(cfg: &ExperimentConfig, model: &Model, n: usize, seed: u64) -> Result<Tensor> {
    sample(model, &Conditioning::Concept(cfg.dataset.main_concept.clone()), &cfg.schedule.build()?, n, seed)
}

pub fn evaluate_variant(
    cfg: &ExperimentConfig,
    variant: &str,
    model: &Model,
    protected: &ProtectedSet,
    probe: &ProbeClassifier,
) -> Result<(MetricRow, Tensor)> {
    let generated = generate_main(cfg, model, cfg.eval.samples, cfg.eval.sample_seed)?;
    let row = MetricRow {
        variant: variant.to_string(),
        copy_score: copy_score(&generated, protected)?,
        concept_fidelity: concept_fidelity(&generated, &cfg.dataset.main_concept, probe)?,
    };
    Ok((row, generated))
}

/// Identity for 2-D data, otherwise a fixed Gaussian projection to 2-D.
pub struct View2d(Option<FeatureMap>);

impl View2d {
    pub fn new(dim: usize) -> Self {
        View2d(if dim == 2 { None } else { Some(FeatureMap::new(dim, 2, VIEW_SEED)) })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.0 {
            None => Ok(x.clone()),
            Some(map) => map.features(x),
        }
    }
}

/// Grid over the main-caption training data and the protected cells: every
/// cell within one step of a protected sample.
pub struct LeakageSetup {
    pub view: View2d,
    pub grid: Grid2d,
    pub data_points: Tensor,
    pub protected: ConceptSet<usize>,
}

impl LeakageSetup {
    pub fn new(cfg: &ExperimentConfig, data: &Dataset) -> Result<Self> {
        let view = View2d::new(cfg.dataset.kind.data_dim());
        let main = data.general.of_concept(&cfg.dataset.main_concept)?;
        let sens = data.sensitive.samples.tensor()?;
        let mut rows: Vec<&[f64]> = (0..main.rows()).map(|i| main.row(i)).collect();
        rows.extend((0..sens.rows()).map(|i| sens.row(i)));
        let data_points = view.apply(&Tensor::stack_rows(&rows)?)?;
        let grid = Grid2d::from_points(&data_points, cfg.eval.grid)?;
        let n = grid.n as i64;
        let mut cells = std::collections::BTreeSet::new();
        for c in grid.cells(&view.apply(&sens)?)? {
            if c == grid.outside() {
                continue;
            }
            let (i, j) = ((c % grid.n) as i64, (c / grid.n) as i64);
            for dj in -1..=1 {
                for di in -1..=1 {
                    let (a, b) = (i + di, j + dj);
                    if (0..n).contains(&a) && (0..n).contains(&b) {
                        cells.insert((b * n + a) as usize);
                    }
                }
            }
        }
        let protected = ConceptSet::from_cells("cells next to protected samples", cells);
        Ok(LeakageSetup { view, grid, data_points, protected })
    }

    /// Leakage check and amplification rows for one model.
    pub fn evaluate(&self, cfg: &ExperimentConfig, model: &Model, seed: u64) -> Result<(LeakageReport, Vec<AmplificationRow>)> {
        let pool = self.view.apply(&generate_main(cfg, model, cfg.eval.leakage_pool, seed)?)?;
        let model_dist = self.grid.histogram(&pool)?;
        let data_dist = self.grid.histogram(&self.data_points)?;
        let report = verify_leakage_theorem(&model_dist, &data_dist, &self.protected, Some(cfg.eval.leakage_pool))?;
        let hits: Vec<bool> = self.grid.cells(&pool)?.iter().map(|c| self.protected.contains(c)).collect();
        let rows = cfg
            .eval
            .amplification_n
            .iter()
            .map(|&n| AmplificationRow::new(n, report.model_mass, report.alpha, report.delta, hit_rate_from_pool(&hits, n)?))
            .collect::<Result<_>>()?;
        Ok((report, rows))
    }
}

/// Sampling seed shared by every leakage evaluation of a run.
pub fn leakage_seed(cfg: &ExperimentConfig) -> u64 {
    stream_rng(cfg.seed, streams::LEAKAGE).random()
}

/// Attack configs for the first `attack.targets` protected samples.
pub fn attack_configs(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<AttackConfig>> {
    let mut rng = stream_rng(cfg.seed, streams::ATTACK);
    let count = cfg.attack.targets.min(data.sensitive.samples.len());
    (0..count)
        .map(|i| {
            let init = match cfg.attack.init {
                AttackStart::Main => AttackInit::Concept(cfg.dataset.main_concept.clone()),
                AttackStart::Random => AttackInit::Random,
            };
            let target = Tensor::vector(data.sensitive.samples.row(i).to_vec())?;
            let mut a = AttackConfig::new(target, init, rng.random());
            a.steps = cfg.attack.steps;
            a.lr = cfg.attack.lr;
            a.draws = cfg.attack.draws;
            a.eval_samples = cfg.attack.eval_samples;
            Ok(a)
        })
        .collect()
}

struct Runner {
    report: RunReport,
}

impl Runner {
    fn stage<T>(&mut self, name: &str, blocked: Option<String>, f: impl FnOnce(&mut RunReport) -> Result<T>) -> Option<T> {
        if let Some(reason) = blocked {
            self.report.stages.push((name.into(), StageStatus::Skipped(reason)));
            return None;
        }
        let t0 = Instant::now();
        let out = f(&mut self.report);
        self.report.timings.push((name.into(), t0.elapsed().as_secs_f64()));
        match out {
            Ok(v) => {
                self.report.stages.push((name.into(), StageStatus::Done));
                Some(v)
            }
            Err(e) => {
                self.report.stages.push((name.into(), StageStatus::Failed(e.to_string())));
                None
            }
        }
    }
}

fn needs<T>(dep: &Option<T>, what: &str) -> Option<String> {
    if dep.is_some() {
        None
    } else {
        Some(format!("{what} unavailable"))
    }
}

/// Runs every stage. Config errors are returned; stage failures are recorded
/// in the report.
pub fn run_experiment_suite(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut run = Runner { report: RunReport::new(cfg.clone()) };

    let data = run.stage("dataset", None, |_| prepare_dataset(cfg));
    let probe = run.stage("probe", needs(&data, "dataset"), |r| {
        let d = data.as_ref().expect("checked");
        let p = calibrate_probe(&d.general.tensor()?, &d.general.labels, &cfg.dataset.concepts, cfg.eval.probe_seed)?;
        r.probe_accuracy = p.calibration().map(|c| c.held_out_accuracy);
        Ok(p)
    });
    let pretrained = run.stage("pretrain", needs(&data, "dataset"), |r| {
        let (cp, losses) = run_pretrain(cfg, data.as_ref().expect("checked"))?;
        r.pretrain_losses = losses;
        r.checkpoints.push(cp.clone());
        Ok(cp.model)
    });

    let sensitive_empty = data.as_ref().is_some_and(|d| d.sensitive.samples.is_empty());
    let ft_block = |pre: &Option<Model>| {
        needs(pre, "pretrained model").or_else(|| sensitive_empty.then(|| "sensitive split is empty".to_string()))
    };
    let naive = run.stage("finetune_naive", ft_block(&pretrained), |r| {
        let (cp, res) = run_finetune(cfg, pretrained.as_ref().expect("checked"), data.as_ref().expect("checked"), FinetuneMode::Naive)?;
        r.naive = Some(res);
        r.checkpoints.push(cp.clone());
        Ok(cp.model)
    });
    let projected = run.stage("finetune_projected", ft_block(&pretrained), |r| {
        let (cp, res) =
            run_finetune(cfg, pretrained.as_ref().expect("checked"), data.as_ref().expect("checked"), FinetuneMode::Projected)?;
        r.projected = Some(res);
        r.checkpoints.push(cp.clone());
        Ok(cp.model)
    });

    let variants: Vec<(&str, &Model)> = [("pretrained", &pretrained), ("naive", &naive), ("projected", &projected)]
        .into_iter()
        .filter_map(|(n, m)| m.as_ref().map(|m| (n, m)))
        .collect();

    let eval_block = needs(&probe, "probe").or_else(|| needs(&pretrained, "pretrained model")).or_else(|| {
        sensitive_empty.then(|| "no protected samples to score against".to_string())
    });
    run.stage("evaluate", eval_block, |r| {
        let d = data.as_ref().expect("checked");
        let prot = protected_set(d)?;
        let view = View2d::new(cfg.dataset.kind.data_dim());
        let pv = view.apply(prot.samples())?;
        r.scatter.extend((0..pv.rows()).map(|i| ("protected".to_string(), [pv.row(i)[0], pv.row(i)[1]])));
        for (name, model) in &variants {
            let (row, generated) = evaluate_variant(cfg, name, model, &prot, probe.as_ref().expect("checked"))?;
            r.metrics.push(row);
            let gv = view.apply(&generated)?;
            r.scatter.extend((0..gv.rows()).map(|i| (name.to_string(), [gv.row(i)[0], gv.row(i)[1]])));
        }
        Ok(())
    });

    let leak_block = needs(&pretrained, "pretrained model")
        .or_else(|| sensitive_empty.then(|| "no protected samples define the concept set".to_string()));
    run.stage("leakage", leak_block, |r| {
        let setup = LeakageSetup::new(cfg, data.as_ref().expect("checked"))?;
        let seed = leakage_seed(cfg);
        for (name, model) in &variants {
            let (rep, rows) = setup.evaluate(cfg, model, seed)?;
            r.leakage.push((name.to_string(), rep));
            r.amplification.extend(rows.into_iter().map(|row| (name.to_string(), row)));
        }
        Ok(())
    });

    let attack_block = needs(&naive, "naive model").or_else(|| needs(&projected, "projected model"));
    run.stage("attack", attack_block, |r| {
        let sched: NoiseSchedule = cfg.schedule.build()?;
        for a in attack_configs(cfg, data.as_ref().expect("checked"))? {
            r.attacks.push(attack_ab_compare(naive.as_ref().expect("checked"), projected.as_ref().expect("checked"), &sched, &a)?);
        }
        Ok(())
    });

    Ok(run.report)
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<fs::File>) -> std::io::Result<()>) -> Result<PathBuf> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes the config, CSVs, summary and checkpoints into `dir`. Every file
/// is a pure function of the report, so reruns are byte-identical.
pub fn write_run_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    files.push(write_file(&dir.join("config.txt"), |w| w.write_all(report.config.to_text().as_bytes()))?);
    files.push(write_file(&dir.join("summary.csv"), |w| w.write_all(summary_csv(report).as_bytes()))?);
    files.push(write_file(&dir.join("pretrain_loss.csv"), |w| {
        writeln!(w, "step,loss")?;
        for (i, l) in report.pretrain_losses.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        Ok(())
    })?);
    if let (Some(n), Some(p)) = (&report.naive, &report.projected) {
        files.push(write_file(&dir.join("finetune_loss.csv"), |w| {
            writeln!(w, "step,naive,projected")?;
            for (i, (a, b)) in n.losses.iter().zip(&p.losses).enumerate() {
                writeln!(w, "{i},{a},{b}")?;
            }
            Ok(())
        })?);
    }
    if let Some(p) = &report.projected {
        files.push(write_file(&dir.join("projection.csv"), |w| write_reports_csv(w, &p.reports))?);
    }
    if !report.metrics.is_empty() {
        files.push(write_file(&dir.join("metrics.csv"), |w| {
            writeln!(w, "{METRICS_CSV_HEADER}")?;
            for m in &report.metrics {
                writeln!(w, "{},{},{}", m.variant, m.copy_score, m.concept_fidelity)?;
            }
            Ok(())
        })?);
    }
    if !report.leakage.is_empty() {
        files.push(write_file(&dir.join("leakage.csv"), |w| {
            writeln!(w, "{LEAKAGE_CSV_HEADER}")?;
            for (stage, l) in &report.leakage {
                writeln!(w, "{}", l.csv_row(stage))?;
            }
            Ok(())
        })?);
        files.push(write_file(&dir.join("amplification.csv"), |w| {
            writeln!(w, "stage,{AMPLIFICATION_CSV_HEADER}")?;
            for (stage, row) in &report.amplification {
                writeln!(w, "{stage},{}", row.csv_row())?;
            }
            Ok(())
        })?);
    }
    if !report.attacks.is_empty() {
        files.push(write_file(&dir.join("attack.csv"), |w| {
            writeln!(w, "target,objective,naive_initial,naive_final,projected_initial,projected_final,ratio")?;
            for (i, a) in report.attacks.iter().enumerate() {
                writeln!(
                    w,
                    "{i},{SURROGATE_LABEL},{},{},{},{},{}",
                    a.naive.initial_copy_score,
                    a.naive.final_copy_score,
                    a.projected.initial_copy_score,
                    a.projected.final_copy_score,
                    a.ratio()
                )?;
            }
            Ok(())
        })?);
        files.push(write_file(&dir.join("attack_curves.csv"), |w| {
            writeln!(w, "target,step,naive_loss,projected_loss")?;
            for (t, a) in report.attacks.iter().enumerate() {
                for (i, (x, y)) in a.naive.loss_curve.iter().zip(&a.projected.loss_curve).enumerate() {
                    writeln!(w, "{t},{i},{x},{y}")?;
                }
            }
            Ok(())
        })?);
    }
    if !report.scatter.is_empty() {
        files.push(write_file(&dir.join("scatter.csv"), |w| {
            writeln!(w, "source,x,y")?;
            for (s, [x, y]) in &report.scatter {
                writeln!(w, "{s},{x},{y}")?;
            }
            Ok(())
        })?);
    }
    let cp_dir = dir.join("checkpoints");
    if !report.checkpoints.is_empty() {
        fs::create_dir_all(&cp_dir).map_err(|e| Error::io(&cp_dir, e))?;
    }
    for cp in &report.checkpoints {
        let p = cp_dir.join(format!("{}.sgrd", cp.stage));
        cp.save(&p)?;
        files.push(p);
    }
    Ok(files)
}

fn mean_attack(report: &RunReport, f: impl Fn(&AttackComparison) -> f64) -> Option<f64> {
    (!report.attacks.is_empty()).then(|| report.attacks.iter().map(f).sum::<f64>() / report.attacks.len() as f64)
}

/// `key,value` lines: stage status, headline metrics and labels.
pub fn summary_csv(report: &RunReport) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    for (stage, status) in &report.stages {
        rows.push((format!("stage.{stage}"), status.to_string().replace(',', ";")));
    }
    let opt = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |x| x.to_string());
    rows.push(("probe_accuracy".into(), opt(report.probe_accuracy)));
    for v in ["pretrained", "naive", "projected"] {
        rows.push((format!("copy_score.{v}"), opt(report.metric(v).map(|m| m.copy_score))));
        rows.push((format!("concept_fidelity.{v}"), opt(report.metric(v).map(|m| m.concept_fidelity))));
    }
    rows.push((
        "projected_identical_to_naive".into(),
        report.projected_matches_naive().map_or_else(|| "skipped".into(), |b| b.to_string()),
    ));
    rows.push(("skipped_projection_steps".into(), report.projected.as_ref().map_or_else(|| "skipped".into(), |p| p.skipped.len().to_string())));
    rows.push(("attack.objective".into(), SURROGATE_LABEL.into()));
    rows.push(("attack.naive_copy_score".into(), opt(mean_attack(report, |a| a.naive.final_copy_score))));
    rows.push(("attack.projected_copy_score".into(), opt(mean_attack(report, |a| a.projected.final_copy_score))));
    rows.push((
        "leakage.bound_holds".into(),
        if report.leakage.is_empty() { "skipped".into() } else { report.leakage.iter().all(|(_, l)| l.holds).to_string() },
    ));
    rows.push((
        "amplification.within_tolerance".into(),
        if report.amplification.is_empty() {
            "skipped".into()
        } else {
            report.amplification.iter().all(|(_, a)| a.within).to_string()
        },
    ));
    rows.push(("schedule_note".into(), "step counts and sizes are desk-scale defaults chosen for this artifact".into()));
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}
