//! Forward noising, the denoising-score-matching loss and the ancestral
//! sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-timestep `β_t`, `α_t = 1 - β_t` and `ᾱ_t = Π_{s≤t} α_s`.
///
/// Timesteps are 1-based: `t = 1..=T` maps to index `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        NoiseSchedule { beta, alpha, alpha_bar }
    }

    /// Builds a schedule from explicit `ᾱ` values, for degenerate-endpoint
    /// fixtures. `β` and `α` are derived from consecutive ratios.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument("alpha_bar values must lie in [0, 1]".into()));
        }
        let mut prev = 1.0;
        let mut alpha = Vec::with_capacity(alpha_bar.len());
        for &ab in &alpha_bar {
            alpha.push(if prev > 0.0 { ab / prev } else { 0.0 });
            prev = ab;
        }
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let i = sched.check_t(t)?;
    let ab = sched.alpha_bar[i];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "q_sample", |x, e| a * x + b * e)
}

/// Row-wise [`q_sample`] with one timestep per row of `x0 [n, d]`.
pub fn q_sample_rows(x0: &Tensor, timesteps: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let (n, d) = x0.as_matrix("q_sample")?;
    if eps.shape() != x0.shape() || timesteps.len() != n {
        return Err(Error::shape("q_sample", "x0, eps and timesteps disagree"));
    }
    let mut out = Vec::with_capacity(n * d);
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = sched.alpha_bar[sched.check_t(t)?];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(x0.row(i).iter().zip(eps.row(i)).map(|(x, e)| a * x + b * e));
    }
    Tensor::matrix(n, d, out)
}

/// One DSM minibatch: clean samples, their conditioning labels, and the
/// timestep and noise draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub concept_ids: Vec<String>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

impl Batch {
    pub fn new(x0: Tensor, concept_ids: Vec<String>, timesteps: Vec<usize>, noise: Tensor) -> Result<Self> {
        let (n, _) = x0.as_matrix("batch")?;
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if noise.shape() != x0.shape() || concept_ids.len() != n || timesteps.len() != n {
            return Err(Error::shape("batch", format!(
                "x0 {:?}, noise {:?}, {} labels, {} timesteps",
                x0.shape(),
                noise.shape(),
                concept_ids.len(),
                timesteps.len()
            )));
        }
        Ok(Batch { x0, concept_ids, timesteps, noise })
    }

    /// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` for the given clean rows.
    pub fn draw<R: Rng + ?Sized>(
        x0: Tensor,
        concept_ids: Vec<String>,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, d) = x0.as_matrix("batch")?;
        let timesteps = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
        let noise = Tensor::randn(&[n, d], 1.0, rng);
        Batch::new(x0, concept_ids, timesteps, noise)
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Same draws, different conditioning labels.
    pub fn relabel(&self, concept: &str) -> Batch {
        Batch { concept_ids: vec![concept.to_string(); self.len()], ..self.clone() }
    }
}

/// Conditioning signal as seen inside a graph.
#[derive(Clone, Copy, Debug)]
pub enum CondInput<'a> {
    /// One concept label per row, looked up in the model's table.
    Concepts(&'a [String]),
    /// A `[1, e]` embedding node shared by every row.
    Embedding(NodeId),
}

/// A noise predictor `ε_θ(x_t, t, c)` that can be recorded into a graph.
pub trait EpsModel {
    fn eps_node(&self, graph: &mut Graph, x_t: NodeId, timesteps: &[usize], cond: CondInput<'_>) -> Result<NodeId>;
}

/// Mean over batch and coordinates of `(ε - ε_θ(x_t, t, c))²`, with the
/// conditioning taken from the batch labels.
pub fn dsm_loss<M: EpsModel + ?Sized>(graph: &mut Graph, model: &M, batch: &Batch, sched: &NoiseSchedule) -> Result<NodeId> {
    dsm_loss_with(graph, model, batch, CondInput::Concepts(&batch.concept_ids), sched)
}

pub fn dsm_loss_with<M: EpsModel + ?Sized>(
    graph: &mut Graph,
    model: &M,
    batch: &Batch,
    cond: CondInput<'_>,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let x_t = q_sample_rows(&batch.x0, &batch.timesteps, &batch.noise, sched)?;
    let x_t = graph.constant(x_t);
    let eps = graph.constant(batch.noise.clone());
    let pred = model.eps_node(graph, x_t, &batch.timesteps, cond)?;
    let diff = graph.sub(eps, pred)?;
    let sq = graph.square(diff)?;
    graph.mean(sq)
}

/// Conditioning for generation: a declared concept or a raw embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Concept(String),
    Embedding(Tensor),
}

/// Inference-only noise prediction for a block of samples at one timestep.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor>;
}

const SAMPLE_CHUNK: usize = 256;

/// Ancestral sampling, `t = T..1`:
/// `x_{t-1} = (x_t - β_t/sqrt(1-ᾱ_t)·ε̂) / sqrt(α_t) + σ_t z`, `σ_t² = β_t`, `z = 0` at `t = 1`.
///
/// Samples are produced in fixed chunks, each with its own RNG stream derived
/// from `seed`, so the output depends only on `(seed, n)`.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let d = model.data_dim();
    let mut out = Vec::with_capacity(n * d);
    for (chunk, start) in (0..n).step_by(SAMPLE_CHUNK).enumerate() {
        let rows = SAMPLE_CHUNK.min(n - start);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        out.extend(sample_chunk(model, cond, sched, rows, d, &mut rng)?.into_data());
    }
    Tensor::matrix(n, d, out)
}

fn sample_chunk<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    rows: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut x = Tensor::randn(&[rows, d], 1.0, rng);
    for t in (1..=sched.steps()).rev() {
        let i = t - 1;
        let eps = model.predict_noise(&x, t, cond)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("sample", format!("predictor returned {:?}", eps.shape())));
        }
        let inv_sqrt_alpha = 1.0 / sched.alpha[i].sqrt();
        let coef = sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt();
        let sigma = sched.beta[i].sqrt();
        let data = x.data_mut();
        for (xv, &e) in data.iter_mut().zip(eps.data()) {
            *xv = inv_sqrt_alpha * (*xv - coef * e);
        }
        if t > 1 {
            for xv in data.iter_mut() {
                *xv += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "sample" });
        }
    }
    Ok(x)
}
