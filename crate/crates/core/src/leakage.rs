//! Total-variation leakage checks on finite supports.
//!
//! If a model distribution is within TV distance `δ` of the data distribution
//! and the data puts mass `α` on a set `S`, the model puts at least `α - δ` on
//! `S`. Over `N` independent draws, the chance of hitting `S` at least once is
//! at least `1 - (1 - α + δ)^N`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Cell = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDist {
    support: Vec<Cell>,
    probs: Vec<f64>,
}

impl FiniteDist {
    pub fn new(support: Vec<Cell>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::InvalidArgument(format!(
                "support of {} cells with {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        let mut seen = HashSet::with_capacity(support.len());
        if !support.iter().all(|c| seen.insert(*c)) {
            return Err(Error::InvalidArgument("duplicate cell in support".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(FiniteDist { support, probs })
    }

    pub fn from_counts(support: Vec<Cell>, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("counts"));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        FiniteDist::new(support, probs)
    }

    pub fn support(&self) -> &[Cell] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mass(&self, set: &ConceptSet<Cell>) -> f64 {
        self.support.iter().zip(&self.probs).filter(|(c, _)| set.contains(c)).map(|(_, p)| p).sum()
    }
}

/// Membership test for a set of samples.
#[derive(Clone)]
pub struct ConceptSet<T> {
    description: String,
    predicate: Arc<dyn Fn(&T) -> bool + Send + Sync>,
}

impl<T> fmt::Debug for ConceptSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConceptSet").field("description", &self.description).finish()
    }
}

impl<T> ConceptSet<T> {
    pub fn new(description: impl Into<String>, predicate: impl Fn(&T) -> bool + Send + Sync + 'static) -> Self {
        ConceptSet { description: description.into(), predicate: Arc::new(predicate) }
    }

    pub fn everything() -> Self {
        ConceptSet::new("everything", |_| true)
    }

    pub fn nothing() -> Self {
        ConceptSet::new("nothing", |_| false)
    }

    pub fn contains(&self, x: &T) -> bool {
        (self.predicate)(x)
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

impl ConceptSet<Cell> {
    pub fn from_cells(description: impl Into<String>, cells: BTreeSet<Cell>) -> Self {
        ConceptSet::new(description, move |c| cells.contains(c))
    }
}

/// `½ Σ |p_i - q_i|`. Both distributions must list the same cells in the same order.
pub fn tv_distance(p: &FiniteDist, q: &FiniteDist) -> Result<f64> {
    if p.support != q.support {
        return Err(Error::SupportMismatch(format!("{} vs {} cells", p.support.len(), q.support.len())));
    }
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `α - δ`. Negative values are vacuous and returned as-is.
pub fn leakage_lower_bound(alpha: f64, delta: f64) -> f64 {
    alpha - delta
}

/// `1 - (1 - α + δ)^N`, clamped to `[0, 1]`.
pub fn amplification_prob(alpha: f64, delta: f64, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidArgument("amplification needs N >= 1".into()));
    }
    let exp = i32::try_from(n).map_err(|_| Error::InvalidArgument(format!("N = {n} too large")))?;
    Ok((1.0 - (1.0 - alpha + delta).powi(exp)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRate {
    pub rate: f64,
    pub trials: usize,
    /// Binomial standard error of `rate`.
    pub stderr: f64,
}

impl HitRate {
    fn from_hits(hits: usize, trials: usize) -> Self {
        let rate = hits as f64 / trials as f64;
        HitRate { rate, trials, stderr: (rate * (1.0 - rate) / trials as f64).sqrt() }
    }
}

/// Fraction of trials in which any of `n` draws lands in `set`. Trial `k`
/// gets its own RNG stream, so the result does not depend on trial order.
pub fn empirical_hit_rate<T, F>(mut sampler: F, set: &ConceptSet<T>, n: usize, trials: usize, seed: u64) -> Result<HitRate>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Result<Vec<T>>,
{
    if trials < 1 || n < 1 {
        return Err(Error::InvalidArgument("hit rate needs trials >= 1 and N >= 1".into()));
    }
    let mut hits = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let draws = sampler(&mut rng, n)?;
        if draws.len() != n {
            return Err(Error::InvalidArgument(format!("sampler returned {} of {n} draws", draws.len())));
        }
        if draws.iter().any(|x| set.contains(x)) {
            hits += 1;
        }
    }
    Ok(HitRate::from_hits(hits, trials))
}

/// Hit rate from a pool of i.i.d. draws split into consecutive groups of `n`.
/// Leftover draws are ignored.
pub fn hit_rate_from_pool(hits: &[bool], n: usize) -> Result<HitRate> {
    if n < 1 || hits.len() < n {
        return Err(Error::InvalidArgument(format!("{} draws cannot fill a group of {n}", hits.len())));
    }
    let trials = hits.len() / n;
    let count = hits.chunks_exact(n).filter(|g| g.iter().any(|h| *h)).count();
    Ok(HitRate::from_hits(count, trials))
}

/// Uniform `n × n` grid over a 2D bounding box plus one cell for everything
/// outside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2d {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_w: f64,
    pub cell_h: f64,
    pub n: usize,
}

impl Grid2d {
    /// Box around `points` (`[m, 2]`) with each side pushed out by 5% of
    /// the extent, so the box is 10% larger than the data.
    pub fn from_points(points: &Tensor, n: usize) -> Result<Self> {
        let (m, d) = points.as_matrix("Grid2d::from_points")?;
        if d != 2 || m == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("grid needs [m, 2] points and n >= 1, got [{m}, {d}], n={n}")));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for row in points.data().chunks_exact(2) {
            for k in 0..2 {
                lo[k] = lo[k].min(row[k]);
                hi[k] = hi[k].max(row[k]);
            }
        }
        let mut span = [0.0; 2];
        for k in 0..2 {
            let ext = hi[k] - lo[k];
            let ext = if ext > 0.0 { ext } else { 1.0 };
            lo[k] -= 0.05 * ext;
            span[k] = 1.1 * ext;
        }
        Ok(Grid2d { x_min: lo[0], y_min: lo[1], cell_w: span[0] / n as f64, cell_h: span[1] / n as f64, n })
    }

    pub fn outside(&self) -> Cell {
        self.n * self.n
    }

    pub fn support(&self) -> Vec<Cell> {
        (0..=self.outside()).collect()
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Cell {
        let i = ((x - self.x_min) / self.cell_w).floor();
        let j = ((y - self.y_min) / self.cell_h).floor();
        let n = self.n as f64;
        if !(i >= 0.0 && i < n && j >= 0.0 && j < n) {
            return self.outside();
        }
        j as usize * self.n + i as usize
    }

    pub fn cells(&self, points: &Tensor) -> Result<Vec<Cell>> {
        let (_, d) = points.as_matrix("Grid2d::cells")?;
        if d != 2 {
            return Err(Error::InvalidArgument(format!("expected 2D points, got dim {d}")));
        }
        Ok(points.data().chunks_exact(2).map(|r| self.cell_of(r[0], r[1])).collect())
    }

    pub fn histogram(&self, points: &Tensor) -> Result<FiniteDist> {
        let mut counts = vec![0u64; self.outside() + 1];
        for c in self.cells(points)? {
            counts[c] += 1;
        }
        FiniteDist::from_counts(self.support(), &counts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub alpha: f64,
    pub delta: f64,
    pub model_mass: f64,
    pub bound: f64,
    /// Monte Carlo standard error of `model_mass` (0 for exact distributions).
    pub mc_stderr: f64,
    pub holds: bool,
}

pub const LEAKAGE_CSV_HEADER: &str = "stage,alpha,delta,model_mass,bound,mc_stderr,holds";

impl LeakageReport {
    pub fn csv_row(&self, stage: &str) -> String {
        format!(
            "{stage},{},{},{},{},{},{}",
            self.alpha, self.delta, self.model_mass, self.bound, self.mc_stderr, self.holds
        )
    }
}

/// Computes `δ`, `α` and the model mass `m` of `set` and checks
/// `m >= α - δ - 3·stderr`. Pass the number of samples behind `model` if it
/// is an empirical estimate.
pub fn verify_leakage_theorem(
    model: &FiniteDist,
    data: &FiniteDist,
    set: &ConceptSet<Cell>,
    model_samples: Option<usize>,
) -> Result<LeakageReport> {
    let delta = tv_distance(model, data)?;
    let alpha = data.mass(set);
    let model_mass = model.mass(set);
    let mc_stderr = match model_samples {
        Some(k) if k > 0 => (model_mass * (1.0 - model_mass) / k as f64).sqrt(),
        _ => 0.0,
    };
    let bound = leakage_lower_bound(alpha, delta);
    // tiny slack for summation order
    let holds = model_mass >= bound - 3.0 * mc_stderr - 1e-12;
    Ok(LeakageReport { alpha, delta, model_mass, bound, mc_stderr, holds })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmplificationRow {
    pub n: usize,
    /// `1 - (1 - p̂)^N` with `p̂` the per-draw model mass.
    pub closed_form: f64,
    /// `1 - (1 - α + δ)^N`.
    pub tv_bound: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub within: bool,
}

pub const AMPLIFICATION_CSV_HEADER: &str = "n,closed_form,tv_bound,empirical,stderr,tolerance,within";

impl AmplificationRow {
    pub fn new(n: usize, p_hat: f64, alpha: f64, delta: f64, rate: HitRate) -> Result<Self> {
        let closed_form = amplification_prob(p_hat, 0.0, n)?;
        let tv_bound = amplification_prob(alpha, delta, n)?;
        let closed_se = (closed_form * (1.0 - closed_form) / rate.trials as f64).sqrt();
        let tolerance = f64::max(0.05, 3.0 * rate.stderr.max(closed_se));
        let within = (rate.rate - closed_form).abs() <= tolerance;
        Ok(AmplificationRow { n, closed_form, tv_bound, empirical: rate.rate, stderr: rate.stderr, tolerance, within })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n, self.closed_form, self.tv_bound, self.empirical, self.stderr, self.tolerance, self.within
        )
    }
}

pub fn write_amplification_csv<W: Write>(mut w: W, rows: &[AmplificationRow]) -> std::io::Result<()> {
    writeln!(w, "{AMPLIFICATION_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
