//! Concept-conditioned MLP denoiser with optional low-rank adapters.
//!
//! Input is `[x_t ‖ time-embed(t) ‖ concept vector]`, followed by two tanh
//! hidden layers and a linear head. Layers are named `l1` (input), `l2`
//! (hidden to hidden) and `l3` (head). Weights are stored `[in, out]` and
//! applied as `x · W`.

use rand::Rng;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::diffusion::{CondInput, Conditioning, EpsModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};

/// Width of the fixed sinusoidal timestep embedding.
pub const TIME_DIM: usize = 8;

pub const LAYERS: [&str; 3] = ["l1", "l2", "l3"];

/// Joins concept ids into a composite caption, e.g. `ring+mark`.
pub const CAPTION_SEP: char = '+';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub data_dim: usize,
    pub width: usize,
    pub embed_dim: usize,
}

impl ModelSpec {
    fn layer_dims(&self, layer: &str) -> Option<(usize, usize)> {
        match layer {
            "l1" => Some((self.data_dim + TIME_DIM + self.embed_dim, self.width)),
            "l2" => Some((self.width, self.width)),
            "l3" => Some((self.width, self.data_dim)),
            _ => None,
        }
    }
}

/// Sinusoidal embedding `[sin(t·ω_k), cos(t·ω_k)]`, `ω_k = 10000^(-k/4)`.
pub fn time_embedding(timesteps: &[usize]) -> Tensor {
    let half = TIME_DIM / 2;
    let mut data = Vec::with_capacity(timesteps.len() * TIME_DIM);
    for &t in timesteps {
        for k in 0..half {
            let w = 10000f64.powf(-(k as f64) / half as f64);
            data.push((t as f64 * w).sin());
        }
        for k in 0..half {
            let w = 10000f64.powf(-(k as f64) / half as f64);
            data.push((t as f64 * w).cos());
        }
    }
    Tensor::matrix(timesteps.len().max(1), TIME_DIM, data).expect("time embedding shape")
}

/// Learned stand-in for a text encoder: one vector per declared concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTable {
    ids: Vec<String>,
    table: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptEmbedding {
    pub concept_id: String,
    pub vec: Tensor,
    pub trainable: bool,
}

impl ConceptTable {
    /// Gaussian-initialised table, one row per id.
    pub fn new<R: Rng + ?Sized>(ids: Vec<String>, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("concept table"));
        }
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::InvalidArgument(format!("concept `{id}` declared twice")));
            }
            if id.is_empty() || id.contains(CAPTION_SEP) {
                return Err(Error::InvalidArgument(format!("bad concept id `{id}`")));
            }
        }
        let table = Tensor::randn(&[ids.len(), embed_dim], 1.0, rng);
        Ok(ConceptTable { ids, table })
    }

    pub fn from_parts(ids: Vec<String>, table: Tensor) -> Result<Self> {
        let (rows, _) = table.as_matrix("concept table")?;
        if rows != ids.len() {
            return Err(Error::shape("concept table", format!("{} ids for {rows} rows", ids.len())));
        }
        Ok(ConceptTable { ids, table })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|c| c == id).ok_or_else(|| Error::UnknownConcept(id.to_string()))
    }

    /// Table rows named by a caption: a single id or ids joined with `+`.
    pub fn caption_indices(&self, caption: &str) -> Result<Vec<usize>> {
        let mut idx = caption.split(CAPTION_SEP).map(|id| self.index_of(id)).collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        Ok(idx)
    }

    /// Embedding of a caption: the sum of its concepts' rows.
    pub fn embed_concept(&self, caption: &str) -> Result<ConceptEmbedding> {
        let idx = self.caption_indices(caption)?;
        let mut v = self.table.row(idx[0]).to_vec();
        for &i in &idx[1..] {
            for (a, b) in v.iter_mut().zip(self.table.row(i)) {
                *a += b;
            }
        }
        Ok(ConceptEmbedding { concept_id: caption.to_string(), vec: Tensor::vector(v)?, trainable: false })
    }

    /// Multi-hot `[n, K]` selection matrix for per-row captions.
    fn one_hot(&self, captions: &[String]) -> Result<Tensor> {
        let k = self.ids.len();
        let mut data = vec![0.0; captions.len() * k];
        for (r, c) in captions.iter().enumerate() {
            for i in self.caption_indices(c)? {
                data[r * k + i] += 1.0;
            }
        }
        Tensor::matrix(captions.len(), k, data)
    }
}

/// Trainable low-rank delta `B·A` added to a frozen `[in, out]` weight.
///
/// `a` is `[rank, out]` (random init) and `b` is `[in, rank]` (zero init), so
/// a freshly attached adapter leaves the layer unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub layer: String,
    pub rank: usize,
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankAdapter {
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    spec: ModelSpec,
    base: ParamVector,
    adapters: Vec<LowRankAdapter>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.data_dim == 0 || spec.width == 0 || spec.embed_dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model spec {spec:?}")));
        }
        let mut segments = Vec::new();
        for layer in LAYERS {
            let (fan_in, fan_out) = spec.layer_dims(layer).expect("known layer");
            // Keep the head small so the untrained model predicts near-zero noise.
            let gain = if layer == "l3" { 0.1 } else { 1.0 };
            let w = Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng);
            segments.push((format!("{layer}.w"), w));
            segments.push((format!("{layer}.b"), Tensor::zeros(&[fan_out])));
        }
        Ok(Denoiser { spec, base: ParamVector::new(segments)?, adapters: Vec::new() })
    }

    pub fn from_parts(spec: ModelSpec, base: ParamVector, adapters: Vec<LowRankAdapter>) -> Result<Self> {
        let template = Denoiser {
            spec: spec.clone(),
            base: ParamVector::new(
                LAYERS
                    .iter()
                    .flat_map(|l| {
                        let (i, o) = spec.layer_dims(l).expect("known layer");
                        [(format!("{l}.w"), Tensor::zeros(&[i, o])), (format!("{l}.b"), Tensor::zeros(&[o]))]
                    })
                    .collect(),
            )?,
            adapters: Vec::new(),
        };
        if !template.base.same_layout(&base) {
            return Err(Error::LayoutMismatch("base parameters do not match the model spec".into()));
        }
        let mut d = Denoiser { base, ..template };
        for ad in adapters {
            d.check_adapter_slot(&ad.layer)?;
            let (i, o) = spec.layer_dims(&ad.layer).expect("checked");
            if ad.a.shape() != [ad.rank, o] || ad.b.shape() != [i, ad.rank] {
                return Err(Error::LayoutMismatch(format!("adapter on {} has wrong shape", ad.layer)));
            }
            d.adapters.push(ad);
        }
        Ok(d)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn base(&self) -> &ParamVector {
        &self.base
    }

    pub fn adapters(&self) -> &[LowRankAdapter] {
        &self.adapters
    }

    /// Zeroes the head so the network predicts zero noise everywhere.
    pub fn zero_head(&mut self) {
        let segments = self
            .base
            .clone()
            .into_segments()
            .into_iter()
            .map(|(n, t)| if n.starts_with("l3.") { (n, Tensor::zeros(t.shape())) } else { (n, t) })
            .collect();
        self.base = ParamVector::new(segments).expect("names unchanged");
    }

    fn check_adapter_slot(&self, layer: &str) -> Result<()> {
        if self.spec.layer_dims(layer).is_none() {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        if self.adapters.iter().any(|a| a.layer == layer) {
            return Err(Error::DuplicateAdapter(layer.to_string()));
        }
        Ok(())
    }

    /// Attaches rank-`rank` adapters to `layers`. The base weights become
    /// frozen whenever the model is trained in adapter mode.
    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, rank: usize, layers: &[&str], rng: &mut R) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        let mut added = Vec::new();
        for &layer in layers {
            self.check_adapter_slot(layer)?;
            if added.iter().any(|a: &LowRankAdapter| a.layer == layer) {
                return Err(Error::DuplicateAdapter(layer.to_string()));
            }
            let (fan_in, fan_out) = self.spec.layer_dims(layer).expect("checked");
            added.push(LowRankAdapter {
                layer: layer.to_string(),
                rank,
                a: Tensor::randn(&[rank, fan_out], 1.0 / (rank as f64).sqrt(), rng),
                b: Tensor::zeros(&[fan_in, rank]),
            });
        }
        self.adapters.extend(added);
        Ok(())
    }

    fn adapter_params(&self) -> ParamVector {
        let mut segments = Vec::new();
        for ad in &self.adapters {
            segments.push((format!("{}.lora_a", ad.layer), ad.a.clone()));
            segments.push((format!("{}.lora_b", ad.layer), ad.b.clone()));
        }
        ParamVector::new(segments).expect("adapter layers unique")
    }
}

/// Which parameters a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    /// Base network plus the concept table.
    Pretrain,
    /// Base network only; concept vectors frozen.
    Full,
    /// Adapter factors only.
    Adapters,
}

/// Denoiser plus its concept table: everything needed to evaluate `ε_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub denoiser: Denoiser,
    pub concepts: ConceptTable,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, concept_ids: Vec<String>, rng: &mut R) -> Result<Self> {
        let embed_dim = spec.embed_dim;
        let denoiser = Denoiser::new(spec, rng)?;
        let concepts = ConceptTable::new(concept_ids, embed_dim, rng)?;
        Ok(Model { denoiser, concepts })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.denoiser.spec()
    }

    pub fn params(&self, scope: ParamScope) -> ParamVector {
        match scope {
            ParamScope::Pretrain => {
                let mut segs = self.denoiser.base.clone().into_segments();
                segs.push(("emb.table".into(), self.concepts.table.clone()));
                ParamVector::new(segs).expect("unique names")
            }
            ParamScope::Full => self.denoiser.base.clone(),
            ParamScope::Adapters => self.denoiser.adapter_params(),
        }
    }

    pub fn set_params(&mut self, scope: ParamScope, params: &ParamVector) -> Result<()> {
        if !self.params(scope).same_layout(params) {
            return Err(Error::LayoutMismatch(format!("cannot assign {scope:?} parameters")));
        }
        match scope {
            ParamScope::Pretrain => {
                let mut segs = params.clone().into_segments();
                let (_, table) = segs.pop().expect("table segment");
                self.denoiser.base = ParamVector::new(segs)?;
                self.concepts.table = table;
            }
            ParamScope::Full => self.denoiser.base = params.clone(),
            ParamScope::Adapters => {
                for (ad, pair) in self.denoiser.adapters.iter_mut().zip(params.segments().chunks(2)) {
                    ad.a = pair[0].1.clone();
                    ad.b = pair[1].1.clone();
                }
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self, scope: ParamScope) -> usize {
        self.params(scope).total_len()
    }

    /// Records the model's parameters into `graph`. Segments in `scope`
    /// become gradient leaves; everything else is constant.
    pub fn bind(&self, graph: &mut Graph, scope: Option<ParamScope>) -> Result<BoundModel<'_>> {
        let base_trainable = matches!(scope, Some(ParamScope::Pretrain | ParamScope::Full));
        let mut trainable = Vec::new();
        let leaf = |g: &mut Graph, name: &str, t: &Tensor, train: bool, list: &mut Vec<(String, NodeId)>| {
            if train {
                let id = g.param(t.clone());
                list.push((name.to_string(), id));
                id
            } else {
                g.constant(t.clone())
            }
        };
        let mut layers = Vec::with_capacity(3);
        for layer in LAYERS {
            let wn = format!("{layer}.w");
            let bn = format!("{layer}.b");
            let w = self.denoiser.base.get(&wn).expect("layer weight");
            let b = self.denoiser.base.get(&bn).expect("layer bias");
            let w = leaf(graph, &wn, w, base_trainable, &mut trainable);
            let b = leaf(graph, &bn, b, base_trainable, &mut trainable);
            layers.push((w, b));
        }
        let table = leaf(graph, "emb.table", &self.concepts.table, scope == Some(ParamScope::Pretrain), &mut trainable);
        for ad in &self.denoiser.adapters {
            let train = scope == Some(ParamScope::Adapters);
            let a = leaf(graph, &format!("{}.lora_a", ad.layer), &ad.a, train, &mut trainable);
            let b = leaf(graph, &format!("{}.lora_b", ad.layer), &ad.b, train, &mut trainable);
            let idx = LAYERS.iter().position(|l| *l == ad.layer).expect("checked layer");
            let delta = graph.matmul(b, a)?;
            layers[idx].0 = graph.add(layers[idx].0, delta)?;
        }
        Ok(BoundModel { model: self, layers: [layers[0], layers[1], layers[2]], table, trainable })
    }

    /// Noise prediction for `x_t` under a single concept vector.
    pub fn denoise(&self, x_t: &Tensor, t: usize, emb: &ConceptEmbedding) -> Result<Tensor> {
        self.predict_noise(x_t, t, &Conditioning::Embedding(emb.vec.clone()))
    }

    fn cond_vector(&self, cond: &Conditioning) -> Result<Tensor> {
        let v = match cond {
            Conditioning::Concept(id) => self.concepts.embed_concept(id)?.vec,
            Conditioning::Embedding(v) => v.clone(),
        };
        if v.len() != self.spec().embed_dim {
            return Err(Error::shape("conditioning", format!("{} vs embed dim {}", v.len(), self.spec().embed_dim)));
        }
        Tensor::matrix(1, v.len(), v.into_data())
    }
}

/// A [`Model`] recorded into a graph.
pub struct BoundModel<'m> {
    model: &'m Model,
    layers: [(NodeId, NodeId); 3],
    table: NodeId,
    trainable: Vec<(String, NodeId)>,
}

impl BoundModel<'_> {
    /// Gradient of the trainable segments, in [`Model::params`] order.
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> Result<ParamVector> {
        ParamVector::new(self.trainable.iter().map(|(n, id)| (n.clone(), grads.get(graph, *id))).collect())
    }

    /// `[n, e]` conditioning rows.
    fn cond_rows(&self, graph: &mut Graph, n: usize, cond: CondInput<'_>) -> Result<NodeId> {
        match cond {
            CondInput::Concepts(ids) => {
                if ids.len() != n {
                    return Err(Error::shape("denoise", format!("{} labels for {n} rows", ids.len())));
                }
                let sel = graph.constant(self.model.concepts.one_hot(ids)?);
                graph.matmul(sel, self.table)
            }
            CondInput::Embedding(e) => {
                let ones = graph.constant(Tensor::full(&[n, 1], 1.0));
                graph.matmul(ones, e)
            }
        }
    }
}

impl EpsModel for BoundModel<'_> {
    fn eps_node(&self, graph: &mut Graph, x_t: NodeId, timesteps: &[usize], cond: CondInput<'_>) -> Result<NodeId> {
        let (n, d) = graph.value(x_t).as_matrix("denoise")?;
        if d != self.model.spec().data_dim || timesteps.len() != n {
            return Err(Error::shape(
                "denoise",
                format!("x_t [{n},{d}] with {} timesteps for data dim {}", timesteps.len(), self.model.spec().data_dim),
            ));
        }
        let temb = graph.constant(time_embedding(timesteps));
        let c = self.cond_rows(graph, n, cond)?;
        let mut h = graph.concat(&[x_t, temb, c])?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = graph.matmul(h, w)?;
            h = graph.broadcast_add(h, b)?;
            if i < 2 {
                h = graph.tanh(h)?;
            }
        }
        Ok(h)
    }
}

impl NoisePredictor for Model {
    fn data_dim(&self) -> usize {
        self.spec().data_dim
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, None)?;
        let e = g.constant(self.cond_vector(cond)?);
        let x = g.constant(x_t.clone());
        let (n, _) = x_t.as_matrix("denoise")?;
        let out = bound.eps_node(&mut g, x, &vec![t; n], CondInput::Embedding(e))?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::diffusion::{dsm_loss, dsm_loss_with, Batch, NoiseSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn small_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(ModelSpec { data_dim: 3, width: 6, embed_dim: 4 }, ids(&["base_shape", "stamp"]), &mut rng)
            .unwrap()
    }

    #[test]
    fn embedding_lookup() {
        let m = small_model(0);
        let a = m.concepts.embed_concept("base_shape").unwrap();
        assert_eq!(a, m.concepts.embed_concept("base_shape").unwrap());
        assert!(matches!(m.concepts.embed_concept("nope"), Err(Error::UnknownConcept(_))));
        let b = m.concepts.embed_concept("stamp").unwrap();
        assert_ne!(a.vec, b.vec);
    }

    #[test]
    fn composite_caption_sums_rows_on_both_paths() {
        let m = small_model(9);
        let a = m.concepts.embed_concept("base_shape").unwrap().vec;
        let b = m.concepts.embed_concept("stamp").unwrap().vec;
        let ab = m.concepts.embed_concept("base_shape+stamp").unwrap().vec;
        let ba = m.concepts.embed_concept("stamp+base_shape").unwrap().vec;
        assert_eq!(ab, ba);
        for k in 0..4 {
            assert_eq!(ab.data()[k], a.data()[k] + b.data()[k]);
        }
        assert!(m.concepts.embed_concept("base_shape+zzz").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ConceptTable::new(ids(&["a+b"]), 4, &mut rng).is_err());

        // graph lookup and direct lookup give the same prediction
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let direct = m.predict_noise(&x, 3, &Conditioning::Concept("base_shape+stamp".into())).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, None).unwrap();
        let xn = g.constant(x);
        let caps = ids(&["base_shape+stamp", "base_shape+stamp"]);
        let out = bound.eps_node(&mut g, xn, &[3, 3], CondInput::Concepts(&caps)).unwrap();
        for (p, q) in g.value(out).data().iter().zip(direct.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn distinct_concepts_get_distinct_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = (0..64).map(|i| format!("c{i}")).collect();
        let t = ConceptTable::new(names, 16, &mut rng).unwrap();
        for i in 0..64 {
            for j in 0..i {
                assert_ne!(t.table().row(i), t.table().row(j));
            }
        }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut m = small_model(1);
        m.denoiser.zero_head();
        let x = Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let e = m.concepts.embed_concept("base_shape").unwrap();
        let out = m.denoise(&x, 3, &e).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn fresh_adapters_preserve_output_exactly() {
        let m = small_model(3);
        let mut with = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        with.denoiser.attach_adapters(2, &["l1", "l2", "l3"], &mut rng).unwrap();
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let e = m.concepts.embed_concept("stamp").unwrap();
        let a = m.denoise(&x, 7, &e).unwrap();
        let b = with.denoise(&x, 7, &e).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.denoise(&x, 7, &e).unwrap());
    }

    #[test]
    fn adapter_counts_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(ModelSpec { data_dim: 64, width: 128, embed_dim: 16 }, ids(&["a"]), &mut rng).unwrap();
        m.denoiser.attach_adapters(4, &["l2"], &mut rng).unwrap();
        assert_eq!(m.trainable_count(ParamScope::Adapters), 1024);
        assert!(matches!(
            m.denoiser.attach_adapters(4, &["l2"], &mut rng),
            Err(Error::DuplicateAdapter(_))
        ));
        assert!(m.denoiser.attach_adapters(0, &["l1"], &mut rng).is_err());
        assert!(matches!(m.denoiser.attach_adapters(1, &["l9"], &mut rng), Err(Error::UnknownLayer(_))));
        m.denoiser.attach_adapters(3, &["l1", "l3"], &mut rng).unwrap();
        let expect = 4 * (128 + 128) + 3 * ((64 + TIME_DIM + 16) + 128) + 3 * (128 + 64);
        assert_eq!(m.trainable_count(ParamScope::Adapters), expect);
    }

    #[test]
    fn set_params_roundtrip_and_layout_check() {
        let mut m = small_model(8);
        for scope in [ParamScope::Pretrain, ParamScope::Full] {
            let p = m.params(scope).scale(0.5);
            m.set_params(scope, &p).unwrap();
            assert_eq!(m.params(scope), p);
        }
        assert!(m.set_params(ParamScope::Full, &m.params(ParamScope::Pretrain)).is_err());
    }

    fn batch(m: &Model, rng: &mut ChaCha8Rng, sched: &NoiseSchedule) -> Batch {
        let x0 = Tensor::randn(&[5, m.spec().data_dim], 1.0, rng);
        let labels = ids(&["base_shape", "stamp", "base_shape", "base_shape", "stamp"]);
        Batch::draw(x0, labels, sched, rng).unwrap()
    }

    fn scope_loss(m: &Model, scope: ParamScope, p: &ParamVector, b: &Batch, s: &NoiseSchedule) -> Result<(f64, ParamVector)> {
        let mut m = m.clone();
        m.set_params(scope, p)?;
        let mut g = Graph::new();
        let bound = m.bind(&mut g, Some(scope))?;
        let loss = dsm_loss(&mut g, &bound, b, s)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item()?, bound.collect_grads(&g, &grads)?))
    }

    #[test]
    fn dsm_gradient_passes_finite_differences_in_every_scope() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = small_model(9);
        m.denoiser.attach_adapters(2, &["l2"], &mut rng).unwrap();
        // give the adapter a nonzero delta so both factors get gradient
        let mut ap = m.params(ParamScope::Adapters);
        ap = ap.sub_scaled(&ap.unflatten(&vec![0.3; ap.total_len()]).unwrap(), 1.0).unwrap();
        m.set_params(ParamScope::Adapters, &ap).unwrap();
        let b = batch(&m, &mut rng, &sched);
        for scope in [ParamScope::Pretrain, ParamScope::Full, ParamScope::Adapters] {
            let p = m.params(scope);
            let err = finite_diff_check(|p| scope_loss(&m, scope, p, &b, &sched), &p, 1e-5).unwrap();
            assert!(err <= 1e-4, "{scope:?}: {err}");
        }
    }

    #[test]
    fn gradient_flows_to_embedding_vector() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = small_model(12);
        let b = batch(&m, &mut rng, &sched);
        let emb = m.concepts.embed_concept("base_shape").unwrap();
        let p = ParamVector::new(vec![("e".into(), Tensor::matrix(1, 4, emb.vec.data().to_vec()).unwrap())]).unwrap();
        let err = finite_diff_check(
            |p| {
                crate::autodiff::value_and_grad(p, |g, l| {
                    let bound = m.bind(g, None)?;
                    dsm_loss_with(g, &bound, &b, CondInput::Embedding(l[0]), &sched)
                })
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = small_model(0);
        let e = m.concepts.embed_concept("base_shape").unwrap();
        assert!(m.denoise(&Tensor::zeros(&[2, 5]), 1, &e).is_err());
        let bad = ConceptEmbedding { vec: Tensor::zeros(&[3]), ..e };
        assert!(m.denoise(&Tensor::zeros(&[2, 3]), 1, &bad).is_err());
    }
}
