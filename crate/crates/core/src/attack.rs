//! Targeted extraction: search for a conditioning embedding that makes a
//! frozen model reproduce a protected sample.
//!
//! The objective is a differentiable surrogate, the DSM loss on the target
//! under the candidate embedding, over a fixed set of `(t, ε)` draws per seed.
//! Reproduction is measured afterwards by sampling and the copy score.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::diffusion::{dsm_loss_with, sample, Batch, CondInput, Conditioning, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{copy_score, ProtectedSet};
use crate::model::Model;
use crate::tensor::Tensor;

pub const SURROGATE_LABEL: &str = "dsm-surrogate";
const MAX_HALVINGS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum AttackInit {
    Random,
    Concept(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Protected sample, `[d]` or `[1, d]`.
    pub target: Tensor,
    pub steps: usize,
    pub lr: f64,
    pub init: AttackInit,
    pub seed: u64,
    /// Number of fixed `(t, ε)` draws in the objective.
    pub draws: usize,
    /// Samples generated to score the final embedding.
    pub eval_samples: usize,
}

impl AttackConfig {
    pub fn new(target: Tensor, init: AttackInit, seed: u64) -> Self {
        AttackConfig { target, steps: 500, lr: 0.05, init, seed, draws: 64, eval_samples: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || !(self.lr >= 0.0 && self.lr.is_finite()) || self.draws < 1 || self.eval_samples < 1 {
            return Err(Error::InvalidArgument(format!(
                "attack needs steps >= 1, lr >= 0, draws >= 1, eval_samples >= 1 (got {}, {}, {}, {})",
                self.steps, self.lr, self.draws, self.eval_samples
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub embedding: Tensor,
    pub initial_loss: f64,
    /// Loss after each step; nonincreasing.
    pub loss_curve: Vec<f64>,
    /// Loss of a predictor that always outputs zero, on the same draws.
    pub zero_predictor_loss: f64,
    pub final_copy_score: f64,
    /// Copy score of the starting embedding, same sampling seed.
    pub initial_copy_score: f64,
}

struct Objective<'a> {
    model: &'a Model,
    batch: Batch,
    sched: &'a NoiseSchedule,
}

impl Objective<'_> {
    fn loss_and_grad(&self, emb: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, None)?;
        let e = g.param(emb.clone());
        let loss = dsm_loss_with(&mut g, &bound, &self.batch, CondInput::Embedding(e), self.sched)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item()?, grads.get(&g, e)))
    }
}

fn target_row(model: &Model, target: &Tensor) -> Result<Tensor> {
    let d = model.spec().data_dim;
    if target.len() != d {
        return Err(Error::shape("attack target", format!("{} values for data dim {d}", target.len())));
    }
    Tensor::matrix(1, d, target.data().to_vec())
}

/// Gradient descent on the embedding. The step size starts at `cfg.lr` every
/// step and is halved (at most three times) while the loss would increase;
/// if it still increases the step is rejected. The model is never modified.
pub fn optimize_adversarial_embedding(model: &Model, sched: &NoiseSchedule, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let e_dim = model.spec().embed_dim;
    let target = target_row(model, &cfg.target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = match &cfg.init {
        AttackInit::Random => Tensor::randn(&[1, e_dim], 1.0, &mut rng),
        AttackInit::Concept(id) => {
            let v = model.concepts.embed_concept(id)?.vec;
            Tensor::matrix(1, e_dim, v.into_data())?
        }
    };
    let rows: Vec<&[f64]> = vec![target.data(); cfg.draws];
    let x0 = Tensor::stack_rows(&rows)?;
    let batch = Batch::draw(x0, vec![String::new(); cfg.draws], sched, &mut rng)?;
    let zero_predictor_loss = batch.noise.data().iter().map(|e| e * e).sum::<f64>() / batch.noise.len() as f64;
    let obj = Objective { model, batch, sched };

    let wrap = |step: usize, lr: f64, last: f64| {
        move |e: Error| match e {
            Error::NonFinite { .. } => Error::AttackNonFinite { step, lr, last_loss: last },
            other => other,
        }
    };
    let mut emb = init.clone();
    let (mut loss, mut grad) = obj.loss_and_grad(&emb).map_err(wrap(0, cfg.lr, f64::NAN))?;
    let initial_loss = loss;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut lr = cfg.lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = emb.zip_map(&grad, "attack step", |e, g| e - lr * g)?;
            let (l, g) = obj.loss_and_grad(&cand).map_err(wrap(step, lr, loss))?;
            if !l.is_finite() {
                return Err(Error::AttackNonFinite { step, lr, last_loss: loss });
            }
            if l <= loss {
                accepted = Some((cand, l, g));
                break;
            }
            lr *= 0.5;
        }
        if let Some((cand, l, g)) = accepted {
            emb = cand;
            loss = l;
            grad = g;
        }
        curve.push(loss);
    }

    let protected = ProtectedSet::new(target, vec!["target".into()])?;
    let score = |e: &Tensor| -> Result<f64> {
        let v = Tensor::vector(e.data().to_vec())?;
        let gen = sample(model, &Conditioning::Embedding(v), sched, cfg.eval_samples, cfg.seed ^ 0x00a7_7ac4)?;
        copy_score(&gen, &protected)
    };
    Ok(AttackResult {
        final_copy_score: score(&emb)?,
        initial_copy_score: score(&init)?,
        embedding: Tensor::vector(emb.into_data())?,
        initial_loss,
        loss_curve: curve,
        zero_predictor_loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackComparison {
    pub naive: AttackResult,
    pub projected: AttackResult,
}

impl AttackComparison {
    /// Projected over naive attacked copy score.
    pub fn ratio(&self) -> f64 {
        self.projected.final_copy_score / self.naive.final_copy_score
    }
}

/// Runs the same attack against both models.
pub fn attack_ab_compare(naive: &Model, projected: &Model, sched: &NoiseSchedule, cfg: &AttackConfig) -> Result<AttackComparison> {
    if naive.spec() != projected.spec()
        || naive.concepts.ids() != projected.concepts.ids()
        || naive.trainable_count(crate::model::ParamScope::Adapters) != projected.trainable_count(crate::model::ParamScope::Adapters)
    {
        return Err(Error::InvalidArgument("attack A/B needs models with the same architecture".into()));
    }
    Ok(AttackComparison {
        naive: optimize_adversarial_embedding(naive, sched, cfg)?,
        projected: optimize_adversarial_embedding(projected, sched, cfg)?,
    })
}

pub const ATTACK_CURVE_HEADER: &str = "step,naive_loss,projected_loss";

/// Both loss curves side by side.
pub fn write_attack_curves<W: Write>(mut w: W, cmp: &AttackComparison) -> std::io::Result<()> {
    writeln!(w, "{ATTACK_CURVE_HEADER}")?;
    for (i, (a, b)) in cmp.naive.loss_curve.iter().zip(&cmp.projected.loss_curve).enumerate() {
        writeln!(w, "{i},{a},{b}")?;
    }
    Ok(())
}
