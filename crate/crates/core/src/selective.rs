//! Gradient projection for selective learning.
//!
//! Each constrained update computes two DSM gradients on the same clean
//! samples and the same `(t, ε)` draws: `g_main` under the desired concept and
//! `g_feat` under the forbidden one. The update direction is
//!
//! ```text
//! g_perp = g_main - λ · <g_main, g_feat> / (|g_feat|² + ε) · g_feat
//! g_proj = (|g_main| / |g_perp|) · g_perp
//! θ     <- θ - η · g_proj
//! ```
//!
//! With `λ = 1, ε = 0` the update is orthogonal to `g_feat`, so the component
//! of `θ` along `g_feat` (the capacity `M_f`) is unchanged by the step.
//!
//! The optimizer is plain gradient descent on purpose: momentum or adaptive
//! state would carry forbidden components from earlier steps into later
//! updates, and none of the per-step guarantees would hold.

use std::io::Write;
use std::sync::{Arc, Mutex};

use crate::autodiff::Graph;
use crate::diffusion::{dsm_loss, Batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Model, ParamScope};
use crate::tensor::{ParamVector, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Learning rate.
    pub eta: f64,
    pub rescale: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { lambda: 0.1, epsilon: 1e-8, eta: 1e-2, rescale: true }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.epsilon >= 0.0) || !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument("epsilon and eta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step ledger of one projected update.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub step: usize,
    pub dot_main_feat: f64,
    pub dot_proj_feat: f64,
    pub norm_main: f64,
    pub norm_feat: f64,
    pub norm_perp: f64,
    pub norm_proj: f64,
    pub capacity_before: f64,
    pub capacity_after: f64,
    pub lambda_used: f64,
    pub loss_main: f64,
    pub loss_feat: f64,
    /// Capacity against the direction frozen at the first step. Diagnostic only.
    pub capacity_reference: Option<f64>,
}

pub const REPORT_CSV_HEADER: &str =
    "step,dot_main_feat,dot_proj_feat,norm_main,norm_perp,norm_proj,capacity_before,capacity_after,lambda_used";

impl ProjectionReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.dot_main_feat,
            self.dot_proj_feat,
            self.norm_main,
            self.norm_perp,
            self.norm_proj,
            self.capacity_before,
            self.capacity_after,
            self.lambda_used
        )
    }

    /// Parses one row written by [`ProjectionReport::csv_row`]. Fields outside
    /// the CSV schema come back zeroed.
    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::InvalidArgument(format!("projection row needs 9 fields: `{line}`")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::InvalidArgument(format!("bad number `{}`", f[i])))
        };
        Ok(ProjectionReport {
            step: f[0].parse().map_err(|_| Error::InvalidArgument(format!("bad step `{}`", f[0])))?,
            dot_main_feat: num(1)?,
            dot_proj_feat: num(2)?,
            norm_main: num(3)?,
            norm_feat: 0.0,
            norm_perp: num(4)?,
            norm_proj: num(5)?,
            capacity_before: num(6)?,
            capacity_after: num(7)?,
            lambda_used: num(8)?,
            loss_main: 0.0,
            loss_feat: 0.0,
            capacity_reference: None,
        })
    }
}

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[ProjectionReport]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Clonable, thread-safe sink for step reports.
#[derive(Clone, Debug, Default)]
pub struct ReportLog(Arc<Mutex<Vec<ProjectionReport>>>);

impl ReportLog {
    pub fn push(&self, r: ProjectionReport) {
        self.0.lock().expect("report log poisoned").push(r);
    }

    pub fn snapshot(&self) -> Vec<ProjectionReport> {
        self.0.lock().expect("report log poisoned").clone()
    }
}

/// Clean samples with both prompts of each caption pair and shared draws.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub x0: Tensor,
    pub main_ids: Vec<String>,
    pub feat_ids: Vec<String>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

impl PairedBatch {
    pub fn main_batch(&self) -> Result<Batch> {
        Batch::new(self.x0.clone(), self.main_ids.clone(), self.timesteps.clone(), self.noise.clone())
    }

    pub fn feat_batch(&self) -> Result<Batch> {
        Batch::new(self.x0.clone(), self.feat_ids.clone(), self.timesteps.clone(), self.noise.clone())
    }
}

/// DSM loss and its gradient over the parameters in `scope`.
pub fn loss_and_grad(model: &Model, scope: ParamScope, batch: &Batch, sched: &NoiseSchedule) -> Result<(f64, ParamVector)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Some(scope))?;
    let loss = dsm_loss(&mut g, &bound, batch, sched)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, bound.collect_grads(&g, &grads)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads {
    pub g_main: ParamVector,
    pub g_feat: ParamVector,
    pub loss_main: f64,
    pub loss_feat: f64,
}

impl PairGrads {
    pub fn new(g_main: ParamVector, g_feat: ParamVector, loss_main: f64, loss_feat: f64) -> Result<Self> {
        if !g_main.same_layout(&g_feat) {
            return Err(Error::LayoutMismatch("g_main and g_feat were taken over different parameters".into()));
        }
        Ok(PairGrads { g_main, g_feat, loss_main, loss_feat })
    }
}

/// Two forward/backward passes over the same samples and draws, differing
/// only in the conditioning prompt.
pub fn compute_pair_grads(model: &Model, scope: ParamScope, batch: &PairedBatch, sched: &NoiseSchedule) -> Result<PairGrads> {
    let (loss_main, g_main) = loss_and_grad(model, scope, &batch.main_batch()?, sched)?;
    let (loss_feat, g_feat) = loss_and_grad(model, scope, &batch.feat_batch()?, sched)?;
    PairGrads::new(g_main, g_feat, loss_main, loss_feat)
}

/// `g_main - λ·<g_main, g_feat>/(|g_feat|² + ε)·g_feat`. A zero denominator
/// (zero feature gradient with `ε = 0`) leaves `g_main` untouched.
pub fn project(g_main: &ParamVector, g_feat: &ParamVector, cfg: &ProjectionConfig) -> Result<ParamVector> {
    let dot = g_main.dot(g_feat)?;
    let denom = g_feat.norm_sq() + cfg.epsilon;
    let coef = if denom > 0.0 { cfg.lambda * (dot / denom) } else { 0.0 };
    g_main.sub_scaled(g_feat, coef)
}

/// Rescales `g_perp` to the norm of `g_main`.
pub fn rescale(g_perp: &ParamVector, g_main: &ParamVector) -> Result<ParamVector> {
    let norm_main = g_main.norm();
    let norm_perp = g_perp.norm();
    if !(norm_perp > 1e-12 * norm_main) {
        return Err(Error::DegenerateGradient { norm_main, norm_perp });
    }
    if !g_perp.same_layout(g_main) {
        return Err(Error::LayoutMismatch("g_perp and g_main differ".into()));
    }
    Ok(g_perp.scale(norm_main / norm_perp))
}

/// `θ - η·g`.
pub fn apply_update(theta: &ParamVector, g: &ParamVector, eta: f64) -> Result<ParamVector> {
    theta.sub_scaled(g, eta)
}

/// `M_f(θ) = (<θ, g_feat> / |g_feat|)²`, the squared length of `θ`'s
/// projection onto `span{g_feat}`.
pub fn capacity(theta: &ParamVector, g_feat: &ParamVector) -> Result<f64> {
    let nsq = g_feat.norm_sq();
    if nsq == 0.0 {
        return Err(Error::ZeroFeatureGradient);
    }
    let dot = theta.dot(g_feat)?;
    Ok(dot * dot / nsq)
}

/// Result of the projection arithmetic, before it is applied to a model.
#[derive(Clone, Debug)]
pub struct Projected {
    pub g_perp: ParamVector,
    pub g_proj: ParamVector,
}

/// Projects and (optionally) rescales `g_main` against `g_feat`.
pub fn constrain(pair: &PairGrads, cfg: &ProjectionConfig) -> Result<Projected> {
    let g_perp = project(&pair.g_main, &pair.g_feat, cfg)?;
    let g_proj = if cfg.rescale {
        rescale(&g_perp, &pair.g_main)?
    } else {
        let (norm_main, norm_perp) = (pair.g_main.norm(), g_perp.norm());
        if !(norm_perp > 1e-12 * norm_main) {
            return Err(Error::DegenerateGradient { norm_main, norm_perp });
        }
        g_perp.clone()
    };
    Ok(Projected { g_perp, g_proj })
}

/// One constrained update: pair gradients, projection, rescale, descent step.
/// On `DegenerateGradient` the model is left untouched.
pub fn projected_step(
    model: &mut Model,
    scope: ParamScope,
    batch: &PairedBatch,
    sched: &NoiseSchedule,
    cfg: &ProjectionConfig,
    step: usize,
    reference: Option<&ParamVector>,
) -> Result<ProjectionReport> {
    cfg.validate()?;
    let pair = compute_pair_grads(model, scope, batch, sched)?;
    let Projected { g_perp, g_proj } = constrain(&pair, cfg)?;
    let theta = model.params(scope);
    let capacity_before = capacity(&theta, &pair.g_feat)?;
    let next = apply_update(&theta, &g_proj, cfg.eta)?;
    if !next.is_finite() {
        return Err(Error::NonFinite { op: "projected_step" });
    }
    let capacity_after = capacity(&next, &pair.g_feat)?;
    let capacity_reference = match reference {
        Some(r) if r.norm_sq() > 0.0 => Some(capacity(&next, r)?),
        _ => None,
    };
    model.set_params(scope, &next)?;
    Ok(ProjectionReport {
        step,
        dot_main_feat: pair.g_main.dot(&pair.g_feat)?,
        dot_proj_feat: g_proj.dot(&pair.g_feat)?,
        norm_main: pair.g_main.norm(),
        norm_feat: pair.g_feat.norm(),
        norm_perp: g_perp.norm(),
        norm_proj: g_proj.norm(),
        capacity_before,
        capacity_after,
        lambda_used: cfg.lambda,
        loss_main: pair.loss_main,
        loss_feat: pair.loss_feat,
        capacity_reference,
    })
}

/// Unconstrained descent step on `g_main`; returns the main loss.
pub fn naive_step(model: &mut Model, scope: ParamScope, batch: &Batch, sched: &NoiseSchedule, eta: f64) -> Result<f64> {
    let (loss, g) = loss_and_grad(model, scope, batch, sched)?;
    let next = apply_update(&model.params(scope), &g, eta)?;
    if !next.is_finite() {
        return Err(Error::NonFinite { op: "naive_step" });
    }
    model.set_params(scope, &next)?;
    Ok(loss)
}

/// What happened on one call to [`SelectiveOptimizer::step`].
#[derive(Clone, Debug)]
pub enum StepOutcome {
    Applied(ProjectionReport),
    Skipped { step: usize, norm_main: f64, norm_perp: f64 },
}

/// Stateful driver: numbers the steps, freezes the reference direction at
/// the first step, logs reports and skipped degenerate steps.
#[derive(Debug)]
pub struct SelectiveOptimizer {
    pub cfg: ProjectionConfig,
    pub scope: ParamScope,
    reference: Option<ParamVector>,
    step: usize,
    log: ReportLog,
    skipped: Vec<usize>,
}

impl SelectiveOptimizer {
    pub fn new(cfg: ProjectionConfig, scope: ParamScope) -> Result<Self> {
        cfg.validate()?;
        Ok(SelectiveOptimizer { cfg, scope, reference: None, step: 0, log: ReportLog::default(), skipped: Vec::new() })
    }

    pub fn log(&self) -> &ReportLog {
        &self.log
    }

    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    pub fn step(&mut self, model: &mut Model, batch: &PairedBatch, sched: &NoiseSchedule) -> Result<StepOutcome> {
        if self.reference.is_none() {
            self.reference = Some(compute_pair_grads(model, self.scope, batch, sched)?.g_feat);
        }
        let step = self.step;
        self.step += 1;
        match projected_step(model, self.scope, batch, sched, &self.cfg, step, self.reference.as_ref()) {
            Ok(report) => {
                self.log.push(report.clone());
                Ok(StepOutcome::Applied(report))
            }
            Err(Error::DegenerateGradient { norm_main, norm_perp }) => {
                self.skipped.push(step);
                Ok(StepOutcome::Skipped { step, norm_main, norm_perp })
            }
            Err(e) => Err(e),
        }
    }
}
