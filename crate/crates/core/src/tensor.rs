//! Dense `f64` tensors and named parameter vectors.
//!
//! [`Tensor`] is a row-major array with a shape header. [`ParamVector`] is the
//! flattened, segment-named view of a model's trainable parameters that every
//! optimizer routine works on.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// I.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarOutput { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Stacks equally long rows into an `[n, d]` matrix.
    pub fn stack_rows(rows: &[&[f64]]) -> Result<Tensor> {
        let first = rows.first().ok_or(Error::Empty("stack_rows"))?;
        let d = first.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("stack_rows", format!("row of {} vs {d}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), d, data)
    }

    pub fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }
}

/// `a [n,k] · b [k,m]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [n,m] · bᵀ` where `b` is `[k,m]`; result `[n,k]`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `[n,k]` and `b` is `[n,m]`; result `[k,m]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.as_matrix("matmul")?;
    let (k2, m) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
    }
    Tensor::matrix(n, m, matmul_raw(&a.data, &b.data, n, k, m))
}

/// Ordered, uniquely named list of tensors: the flattened `θ` (or a gradient
/// with the same layout).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in segments.iter().enumerate() {
            if segments[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::DuplicateSegment(name.clone()));
            }
        }
        Ok(ParamVector { segments })
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn into_segments(self) -> Vec<(String, Tensor)> {
        self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        let a: Vec<_> = self.segments.iter().map(|(n, t)| format!("{n}{:?}", t.shape())).collect();
        let b: Vec<_> = other.segments.iter().map(|(n, t)| format!("{n}{:?}", t.shape())).collect();
        Err(Error::LayoutMismatch(format!("[{}] vs [{}]", a.join(", "), b.join(", "))))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.segments {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "flat length {} vs layout length {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        let segments = self
            .segments
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                let seg = Tensor { shape: t.shape().to_vec(), data: flat[offset..offset + n].to_vec() };
                offset += n;
                (name.clone(), seg)
            })
            .collect();
        Ok(ParamVector { segments })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self.segments.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.segments.iter().flat_map(|(_, t)| t.data().iter())
    }

    /// Inner product in flattened order.
    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self.values().zip(other.values()).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            segments: self.segments.iter().map(|(n, t)| (n.clone(), t.map(|v| c * v))).collect(),
        }
    }

    /// `self - c * other`, elementwise.
    pub fn sub_scaled(&self, other: &ParamVector, c: f64) -> Result<ParamVector> {
        self.check_layout(other)?;
        let segments = self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|((n, a), (_, b))| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - c * y).collect();
                (n.clone(), Tensor { shape: a.shape().to_vec(), data })
            })
            .collect();
        Ok(ParamVector { segments })
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Order-sensitive FNV-1a digest of the raw bits; used to prove parameters
    /// were not touched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.segments {
            for b in name.bytes().chain(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(parts: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamVector {
        ParamVector::new(
            parts
                .iter()
                .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        // a · bᵀᵀ through the nt kernel with b transposed by hand
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt_raw(a.data(), &bt, 2, 3, 2), c.data());
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn_raw(&at, b.data(), 3, 2, 2), c.data());
    }

    #[test]
    fn duplicate_segments_rejected() {
        let t = Tensor::zeros(&[2]);
        let err = ParamVector::new(vec![("w".into(), t.clone()), ("w".into(), t)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateSegment(_)));
    }

    #[test]
    fn dot_requires_identical_layout() {
        let a = pv(&[("w", vec![2], vec![1.0, 2.0])]);
        let b = pv(&[("v", vec![2], vec![1.0, 2.0])]);
        let c = pv(&[("w", vec![1, 2], vec![1.0, 2.0])]);
        assert!(a.dot(&b).is_err());
        assert!(a.dot(&c).is_err());
        assert_eq!(a.dot(&a).unwrap(), 5.0);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bit_exact(
            a in proptest::collection::vec(-1e6f64..1e6, 1..20),
            b in proptest::collection::vec(-1e-6f64..1e-6, 1..20),
        ) {
            let p = pv(&[("a", vec![a.len()], a.clone()), ("b", vec![b.len()], b.clone())]);
            let back = p.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(p.checksum(), back.checksum());
            prop_assert_eq!(p, back);
        }

        #[test]
        fn self_dot_is_squared_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
            let p = pv(&[("v", vec![v.len()], v.clone())]);
            let d = p.dot(&p).unwrap();
            prop_assert!(d >= 0.0);
            let direct: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!((d - p.norm_sq()).abs() <= 4.0 * f64::EPSILON * direct);
            prop_assert!((p.norm() * p.norm() - d).abs() <= 8.0 * f64::EPSILON * direct.max(f64::MIN_POSITIVE));
        }
    }
}
