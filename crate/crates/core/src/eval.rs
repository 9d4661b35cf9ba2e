//! Copy detection and concept fidelity scores.
//!
//! Copy score: cosine similarity after a fixed seeded random projection to
//! 32 features, max over protected samples, mean over generated samples,
//! mapped from `[-1, 1]` to `[0, 1]`. Fidelity: mean probability a frozen
//! softmax probe assigns to the requested concept.
//!
//! Both are desk-scale proxies. Only their direction between two models is
//! meaningful, not their absolute values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, ParamVector, Tensor};

pub const COPY_FEATURE_DIM: usize = 32;
pub const COPY_FEATURE_SEED: u64 = 0x5eed_c0de;
pub const PROBE_MIN_ACCURACY: f64 = 0.9;
pub const PROBE_MIN_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedSet {
    samples: Tensor,
    ids: Vec<String>,
}

impl ProtectedSet {
    pub fn new(samples: Tensor, ids: Vec<String>) -> Result<Self> {
        let (m, _) = samples.as_matrix("ProtectedSet")?;
        if ids.len() != m {
            return Err(Error::InvalidArgument(format!("{m} protected samples with {} ids", ids.len())));
        }
        Ok(ProtectedSet { samples, ids })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Fixed Gaussian projection `d -> k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    matrix: Tensor,
}

impl FeatureMap {
    pub fn new(dim_in: usize, dim_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap { matrix: Tensor::randn(&[dim_in, dim_out], 1.0 / (dim_out as f64).sqrt(), &mut rng) }
    }

    pub fn dim_in(&self) -> usize {
        self.matrix.rows()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, &self.matrix)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

/// Copy score with an explicit feature map.
pub fn copy_score_with(generated: &Tensor, protected: &ProtectedSet, map: &FeatureMap) -> Result<f64> {
    Ok(copy_scores_per_sample(generated, protected, map)?.1)
}

/// Per-sample `[0, 1]` scores and their mean.
pub fn copy_scores_per_sample(generated: &Tensor, protected: &ProtectedSet, map: &FeatureMap) -> Result<(Vec<f64>, f64)> {
    let (n, d) = generated.as_matrix("copy_score")?;
    let (_, pd) = protected.samples.as_matrix("copy_score")?;
    if d != pd || d != map.dim_in() {
        return Err(Error::shape("copy_score", format!("generated dim {d}, protected dim {pd}, features from {}", map.dim_in())));
    }
    let gf = map.features(generated)?;
    let pf = map.features(&protected.samples)?;
    let per: Vec<f64> = (0..n)
        .map(|i| {
            let best = (0..pf.rows()).map(|j| cosine(gf.row(i), pf.row(j))).fold(f64::NEG_INFINITY, f64::max);
            (1.0 + best) / 2.0
        })
        .collect();
    // sorted before summing so the mean is exactly permutation invariant
    let mut sorted = per.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    Ok((per, mean))
}

/// Copy score with the default 32-feature map.
pub fn copy_score(generated: &Tensor, protected: &ProtectedSet) -> Result<f64> {
    let d = generated.cols();
    copy_score_with(generated, protected, &FeatureMap::new(d, COPY_FEATURE_DIM, COPY_FEATURE_SEED))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub held_out_accuracy: f64,
    pub per_concept_accuracy: Vec<f64>,
    pub seed: u64,
}

/// Softmax regression on standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier {
    concepts: Vec<String>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[d, K]`
    weights: Tensor,
    bias: Vec<f64>,
    calibration: Option<Calibration>,
}

impl ProbeClassifier {
    /// Zero-weight probe that refuses to score until calibrated.
    pub fn untrained(dim: usize, concepts: Vec<String>) -> Result<Self> {
        if concepts.is_empty() || dim == 0 {
            return Err(Error::Empty("probe concepts"));
        }
        let k = concepts.len();
        Ok(ProbeClassifier {
            concepts,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            weights: Tensor::zeros(&[dim, k]),
            bias: vec![0.0; k],
            calibration: None,
        })
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    pub fn index_of(&self, concept: &str) -> Result<usize> {
        self.concepts.iter().position(|c| c == concept).ok_or_else(|| Error::UnknownConcept(concept.to_string()))
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.as_matrix("probe")?;
        if d != self.dim() {
            return Err(Error::shape("probe", format!("expected dim {}, got {d}", self.dim())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.scale[k];
            }
        }
        Ok(out)
    }

    fn softmax_standardized(&self, z: &Tensor) -> Result<Tensor> {
        let mut logits = matmul(z, &self.weights)?;
        let k = self.concepts.len();
        for row in logits.data_mut().chunks_exact_mut(k) {
            let mut m = f64::NEG_INFINITY;
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.bias[j];
                m = m.max(*v);
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(logits)
    }

    /// Concept probabilities, `[n, K]`.
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        self.softmax_standardized(&self.standardize(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.probs(x)?;
        Ok((0..p.rows())
            .map(|i| {
                let r = p.row(i);
                (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
            })
            .collect())
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::new(vec![
            ("probe.mean".into(), Tensor::vector(self.mean.clone()).expect("nonempty")),
            ("probe.scale".into(), Tensor::vector(self.scale.clone()).expect("nonempty")),
            ("probe.w".into(), self.weights.clone()),
            ("probe.b".into(), Tensor::vector(self.bias.clone()).expect("nonempty")),
        ])
        .expect("distinct names")
    }

    pub fn checksum(&self) -> u64 {
        self.params().checksum()
    }

    /// Rebuilds a calibrated probe from [`ProbeClassifier::params`].
    pub fn from_params(concepts: Vec<String>, params: &ParamVector, calibration: Calibration) -> Result<Self> {
        let get = |n: &str| params.get(n).ok_or_else(|| Error::LayoutMismatch(format!("missing segment {n}")));
        let mut p = ProbeClassifier::untrained(get("probe.mean")?.len(), concepts)?;
        let d = p.dim();
        let k = p.concepts.len();
        let (w, b) = (get("probe.w")?, get("probe.b")?);
        if w.shape() != [d, k] || b.len() != k || get("probe.scale")?.len() != d {
            return Err(Error::LayoutMismatch("probe segment shapes".into()));
        }
        p.mean = get("probe.mean")?.data().to_vec();
        p.scale = get("probe.scale")?.data().to_vec();
        p.weights = w.clone();
        p.bias = b.data().to_vec();
        p.calibration = Some(calibration);
        Ok(p)
    }
}

/// Mean probability the probe assigns to `concept` over `generated`.
pub fn concept_fidelity(generated: &Tensor, concept: &str, probe: &ProbeClassifier) -> Result<f64> {
    if probe.calibration.is_none() {
        return Err(Error::Uncalibrated);
    }
    if generated.rows() == 0 {
        return Err(Error::Empty("generated samples"));
    }
    let j = probe.index_of(concept)?;
    let p = probe.probs(generated)?;
    Ok((0..p.rows()).map(|i| p.row(i)[j]).sum::<f64>() / p.rows() as f64)
}

const PROBE_EPOCHS: usize = 400;
const PROBE_L2: f64 = 1e-4;

/// Trains the probe on labelled samples with an 80/20 held-out split and
/// freezes it. Fails if held-out accuracy is below 0.9.
pub fn calibrate_probe(samples: &Tensor, labels: &[String], concepts: &[String], seed: u64) -> Result<ProbeClassifier> {
    let (n, d) = samples.as_matrix("calibrate_probe")?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{n} samples with {} labels", labels.len())));
    }
    if concepts.len() < 2 {
        return Err(Error::InvalidArgument("probe needs at least 2 concepts".into()));
    }
    let mut probe = ProbeClassifier::untrained(d, concepts.to_vec())?;
    let k = concepts.len();
    let y: Vec<usize> = labels.iter().map(|l| probe.index_of(l)).collect::<Result<_>>()?;
    for (j, c) in concepts.iter().enumerate() {
        let count = y.iter().filter(|&&v| v == j).count();
        if count < PROBE_MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!("concept {c} has {count} samples, need {PROBE_MIN_SAMPLES}")));
        }
    }

    // stratified split so every concept is held out
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for j in 0..k {
        let mut idx: Vec<usize> = (0..n).filter(|&i| y[i] == j).collect();
        idx.shuffle(&mut rng);
        let cut = idx.len() * 4 / 5;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    for c in 0..d {
        let vals = train.iter().map(|&i| samples.row(i)[c]);
        let mean = vals.clone().sum::<f64>() / train.len() as f64;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / train.len() as f64;
        probe.mean[c] = mean;
        probe.scale[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }

    let rows = |idx: &[usize]| -> Result<Tensor> {
        Tensor::stack_rows(&idx.iter().map(|&i| samples.row(i)).collect::<Vec<_>>())
    };
    let z = probe.standardize(&rows(&train)?)?;
    let m = train.len() as f64;
    let mean_sq = z.data().iter().map(|v| v * v).sum::<f64>() / m;
    let lr = 2.0 / (mean_sq + 1.0);
    for _ in 0..PROBE_EPOCHS {
        let mut resid = probe.softmax_standardized(&z)?;
        for (r, &i) in train.iter().enumerate() {
            resid.data_mut()[r * k + y[i]] -= 1.0;
        }
        // grad W = zᵀ·resid / m + l2·W
        let zt_r = crate::tensor::matmul_tn_raw(z.data(), resid.data(), train.len(), d, k);
        for (w, g) in probe.weights.data_mut().iter_mut().zip(&zt_r) {
            *w -= lr * (g / m + PROBE_L2 * *w);
        }
        for j in 0..k {
            let gb = (0..train.len()).map(|r| resid.data()[r * k + j]).sum::<f64>() / m;
            probe.bias[j] -= lr * gb;
        }
    }

    let pred = probe.predict(&rows(&test)?)?;
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (p, &i) in pred.iter().zip(&test) {
        total[y[i]] += 1;
        if *p == y[i] {
            correct[y[i]] += 1;
        }
    }
    let accuracy = correct.iter().sum::<usize>() as f64 / test.len() as f64;
    if accuracy < PROBE_MIN_ACCURACY {
        return Err(Error::CalibrationFailed { accuracy, required: PROBE_MIN_ACCURACY });
    }
    probe.calibration = Some(Calibration {
        held_out_accuracy: accuracy,
        per_concept_accuracy: correct.iter().zip(&total).map(|(c, t)| *c as f64 / *t as f64).collect(),
        seed,
    });
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn protected(rows: &[&[f64]]) -> ProtectedSet {
        let t = Tensor::stack_rows(rows).unwrap();
        ProtectedSet::new(t, (0..rows.len()).map(|i| format!("p{i}")).collect()).unwrap()
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = Tensor::randn(&[1, 16], 1.7, &mut rng);
            let p = ProtectedSet::new(x.clone(), vec!["a".into()]).unwrap();
            assert_eq!(copy_score(&x, &p).unwrap(), 1.0);
        }
    }

    #[test]
    fn orthogonal_features_score_one_half() {
        // identity features make raw orthogonality exact
        let map = FeatureMap { matrix: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap() };
        let g = Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        assert_eq!(copy_score_with(&g, &protected(&[&[2.0, 0.0]]), &map).unwrap(), 0.5);
        let g = Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap();
        assert_eq!(copy_score_with(&g, &protected(&[&[2.0, 0.0]]), &map).unwrap(), 0.0);
        let g = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(copy_score_with(&g, &protected(&[&[2.0, 0.0]]), &map).unwrap(), 0.5);
    }

    #[test]
    fn max_over_protected_mean_over_generated() {
        let map = FeatureMap { matrix: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap() };
        let prot = protected(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = Tensor::matrix(2, 2, vec![5.0, 0.0, -1.0, 0.0]).unwrap();
        // first matches exactly (1), second is orthogonal to p1 and opposite p0 (0.5)
        assert_eq!(copy_score_with(&g, &prot, &map).unwrap(), 0.75);
    }

    #[test]
    fn copy_score_errors() {
        let empty = ProtectedSet::new(Tensor::zeros(&[1, 3]), vec![]);
        assert!(empty.is_err());
        let prot = protected(&[&[1.0, 0.0, 0.0]]);
        assert!(copy_score(&Tensor::zeros(&[2, 4]), &prot).is_err());
    }

    proptest! {
        #[test]
        fn copy_score_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Tensor::randn(&[6, 8], 1.0, &mut rng);
            let p = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let mut gi: Vec<usize> = (0..6).collect();
            let mut pi: Vec<usize> = (0..4).collect();
            gi.shuffle(&mut rng);
            pi.shuffle(&mut rng);
            let gp = Tensor::stack_rows(&gi.iter().map(|&i| g.row(i)).collect::<Vec<_>>()).unwrap();
            let pp = Tensor::stack_rows(&pi.iter().map(|&i| p.row(i)).collect::<Vec<_>>()).unwrap();
            let ids = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
            let a = copy_score(&g, &ProtectedSet::new(p, ids(4)).unwrap()).unwrap();
            let b = copy_score(&gp, &ProtectedSet::new(pp, ids(4)).unwrap()).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    fn gaussian_concepts(centers: &[Vec<f64>], per: usize, std: f64, seed: u64) -> (Tensor, Vec<String>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = centers[0].len();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (j, c) in centers.iter().enumerate() {
            for _ in 0..per {
                for k in 0..d {
                    data.push(c[k] + std * rng.sample::<f64, _>(StandardNormal));
                }
                labels.push(format!("c{j}"));
            }
        }
        let concepts = (0..centers.len()).map(|j| format!("c{j}")).collect();
        (Tensor::matrix(centers.len() * per, d, data).unwrap(), labels, concepts)
    }

    #[test]
    fn separated_gaussians_calibrate_well() {
        let (x, labels, concepts) = gaussian_concepts(&[vec![-3.0, 0.0], vec![3.0, 0.0]], 150, 1.0, 1);
        let probe = calibrate_probe(&x, &labels, &concepts, 7).unwrap();
        let cal = probe.calibration().unwrap();
        assert!(cal.held_out_accuracy >= 0.95, "{}", cal.held_out_accuracy);
        let p = probe.probs(&x).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn calibration_is_deterministic_and_rejects_bad_inputs() {
        let (x, labels, concepts) = gaussian_concepts(&[vec![-3.0, 1.0], vec![3.0, -1.0], vec![0.0, 5.0]], 120, 1.0, 2);
        let a = calibrate_probe(&x, &labels, &concepts, 11).unwrap();
        let b = calibrate_probe(&x, &labels, &concepts, 11).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(calibrate_probe(&x, &labels, &concepts[..1], 11).is_err());
        let (y, l2, c2) = gaussian_concepts(&[vec![0.0, 0.0], vec![0.0, 0.0]], 150, 1.0, 3);
        assert!(matches!(calibrate_probe(&y, &l2, &c2, 1), Err(Error::CalibrationFailed { .. })));
        let (z, l3, c3) = gaussian_concepts(&[vec![-3.0, 0.0], vec![3.0, 0.0]], 60, 1.0, 4);
        assert!(calibrate_probe(&z, &l3, &c3, 1).is_err());
    }

    #[test]
    fn fidelity_on_training_concept_beats_accuracy() {
        let centers: Vec<Vec<f64>> = (0..4).map(|j| (0..6).map(|k| if k == j { 4.0 } else { 0.0 }).collect()).collect();
        let (x, labels, concepts) = gaussian_concepts(&centers, 150, 1.0, 5);
        let probe = calibrate_probe(&x, &labels, &concepts, 3).unwrap();
        let before = probe.checksum();
        for (j, c) in concepts.iter().enumerate() {
            let rows: Vec<&[f64]> = (0..x.rows()).filter(|&i| labels[i] == *c).map(|i| x.row(i)).collect();
            let f = concept_fidelity(&Tensor::stack_rows(&rows).unwrap(), c, &probe).unwrap();
            let acc = probe.calibration().unwrap().per_concept_accuracy[j];
            assert!(f >= acc - 0.02 || f >= 0.9, "{c}: fidelity {f}, accuracy {acc}");
        }
        assert_eq!(probe.checksum(), before);
    }

    #[test]
    fn noise_fidelity_averages_to_chance() {
        let centers: Vec<Vec<f64>> = (0..3).map(|j| (0..4).map(|k| if k == j { 3.0 } else { 0.0 }).collect()).collect();
        let (x, labels, concepts) = gaussian_concepts(&centers, 120, 1.0, 6);
        let probe = calibrate_probe(&x, &labels, &concepts, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise: Vec<f64> = (0..2000 * 4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let noise = Tensor::matrix(2000, 4, noise).unwrap();
        let fids: Vec<f64> = concepts.iter().map(|c| concept_fidelity(&noise, c, &probe).unwrap()).collect();
        assert!(fids.iter().all(|f| (0.0..=1.0).contains(f)));
        assert!((fids.iter().sum::<f64>() / 3.0 - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn fidelity_errors() {
        let probe = ProbeClassifier::untrained(2, vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(concept_fidelity(&Tensor::zeros(&[1, 2]), "a", &probe), Err(Error::Uncalibrated)));
        let (x, labels, concepts) = gaussian_concepts(&[vec![-3.0, 0.0], vec![3.0, 0.0]], 100, 1.0, 9);
        let probe = calibrate_probe(&x, &labels, &concepts, 1).unwrap();
        assert!(matches!(concept_fidelity(&x, "zzz", &probe), Err(Error::UnknownConcept(_))));
        let again = ProbeClassifier::from_params(concepts.clone(), &probe.params(), probe.calibration().unwrap().clone()).unwrap();
        assert_eq!(again, probe);
    }
}
