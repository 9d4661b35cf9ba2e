//! Two-stage training: plain DSM pretraining on the general split, then
//! naive or projected fine-tuning on the sensitive split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::experiments::data::{SensitiveSplit, Split};
use crate::model::{Model, ModelSpec, ParamScope};
use crate::selective::{
    apply_update, loss_and_grad, naive_step, PairedBatch, ProjectionConfig, ProjectionReport, SelectiveOptimizer,
    StepOutcome,
};
use crate::tensor::Tensor;

/// RNG stream ids. Each purpose draws from its own stream of the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const FINETUNE: u64 = 3;
    pub const ADAPTERS: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const LEAKAGE: u64 = 6;
    pub const ATTACK: u64 = 7;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

const DIVERGE_FACTOR: f64 = 10.0;
const DIVERGE_RUN: usize = 100;

/// Aborts once the loss stays above 10× its first value for 100 steps.
#[derive(Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss, initial: self.initial.unwrap_or(f64::NAN), run: self.run + 1 });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGE_FACTOR * initial {
            self.run += 1;
            if self.run >= DIVERGE_RUN {
                return Err(Error::Diverged { step, loss, initial, run: self.run });
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

pub fn init_model(spec: ModelSpec, concepts: Vec<String>, seed: u64) -> Result<Model> {
    Model::new(spec, concepts, &mut stream_rng(seed, streams::INIT))
}

fn gather(split: &Split, idx: &[usize]) -> Result<Tensor> {
    Tensor::stack_rows(&idx.iter().map(|&i| split.row(i)).collect::<Vec<_>>())
}

/// Plain DSM descent over the base network and concept table. Returns the
/// per-step loss (measured before each update).
pub fn pretrain(model: &mut Model, general: &Split, sched: &NoiseSchedule, stage: &StageSpec, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if general.is_empty() {
        return Err(Error::Empty("general split"));
    }
    if stage.batch == 0 {
        return Err(Error::Config("pretrain.batch must be positive".into()));
    }
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let idx: Vec<usize> = (0..stage.batch).map(|_| rng.random_range(0..general.len())).collect();
        let labels = idx.iter().map(|&i| general.labels[i].clone()).collect();
        let batch = Batch::draw(gather(general, &idx)?, labels, sched, rng)?;
        let (loss, g) = loss_and_grad(model, ParamScope::Pretrain, &batch, sched)?;
        guard.check(step, loss)?;
        let next = apply_update(&model.params(ParamScope::Pretrain), &g, stage.lr)?;
        model.set_params(ParamScope::Pretrain, &next)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Naive,
    Projected,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(FinetuneMode::Naive),
            "projected" => Ok(FinetuneMode::Projected),
            other => Err(Error::Config(format!("unknown fine-tune mode `{other}` (naive | projected)"))),
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FinetuneMode::Naive => "naive",
            FinetuneMode::Projected => "projected",
        })
    }
}

/// Timesteps and a noise fingerprint of one drawn batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrawRecord {
    pub timesteps: Vec<usize>,
    pub noise_bits: u64,
}

pub const RECORDED_DRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    /// Main-prompt loss before each update; NaN for skipped steps.
    pub losses: Vec<f64>,
    pub reports: Vec<ProjectionReport>,
    pub skipped: Vec<usize>,
    pub draws: Vec<DrawRecord>,
}

/// Draws a batch of sensitive samples with both captions and shared `(t, ε)`.
pub fn draw_paired(sens: &SensitiveSplit, batch: usize, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<PairedBatch> {
    let m = sens.samples.len();
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..m)).collect();
    let main_ids: Vec<String> = idx.iter().map(|&i| sens.main_ids[i].clone()).collect();
    let feat_ids = idx.iter().map(|&i| sens.feat_ids[i].clone()).collect();
    let b = Batch::draw(gather(&sens.samples, &idx)?, main_ids, sched, rng)?;
    Ok(PairedBatch { x0: b.x0, main_ids: b.concept_ids, feat_ids, timesteps: b.timesteps, noise: b.noise })
}

/// Fine-tunes `scope` on the sensitive split. Both modes draw the same
/// batches from `rng`, so runs differ only in the update rule.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut Model,
    scope: ParamScope,
    sens: &SensitiveSplit,
    sched: &NoiseSchedule,
    stage: &StageSpec,
    mode: FinetuneMode,
    proj: &ProjectionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneResult> {
    if sens.samples.is_empty() {
        return Err(Error::Empty("sensitive split"));
    }
    if stage.batch == 0 {
        return Err(Error::Config("finetune.batch must be positive".into()));
    }
    let cfg = ProjectionConfig { eta: stage.lr, ..proj.clone() };
    let mut opt = SelectiveOptimizer::new(cfg, scope)?;
    let mut guard = DivergenceGuard::default();
    let mut out = FinetuneResult { losses: Vec::with_capacity(stage.steps), reports: Vec::new(), skipped: Vec::new(), draws: Vec::new() };
    for step in 0..stage.steps {
        let pb = draw_paired(sens, stage.batch, sched, rng)?;
        if out.draws.len() < RECORDED_DRAWS {
            let bits = pb.noise.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3));
            out.draws.push(DrawRecord { timesteps: pb.timesteps.clone(), noise_bits: bits });
        }
        let loss = match mode {
            FinetuneMode::Naive => naive_step(model, scope, &pb.main_batch()?, sched, stage.lr)?,
            FinetuneMode::Projected => match opt.step(model, &pb, sched)? {
                StepOutcome::Applied(r) => r.loss_main,
                StepOutcome::Skipped { .. } => f64::NAN,
            },
        };
        if loss.is_finite() {
            guard.check(step, loss)?;
        }
        out.losses.push(loss);
    }
    out.reports = opt.log().snapshot();
    out.skipped = opt.skipped().to_vec();
    Ok(out)
}
