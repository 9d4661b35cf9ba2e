//! Synthetic datasets with a general split and a sensitive split.
//!
//! Two kinds:
//! - `points2d`: one Gaussian mode per concept on a circle of radius 3. The
//!   sensitive samples form a tight extra mode pushed radially outward from
//!   the main concept's mode.
//! - `glyphs8x8`: one ±1 bitmap per concept plus pixel noise. Sensitive
//!   samples are main-concept glyphs with a fixed 2×2 mark stamped at an
//!   exact value.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::CAPTION_SEP;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Points2d,
    Glyphs,
}

impl DatasetKind {
    pub fn data_dim(self) -> usize {
        match self {
            DatasetKind::Points2d => 2,
            DatasetKind::Glyphs => 64,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points2d" => Ok(DatasetKind::Points2d),
            "glyphs8x8" => Ok(DatasetKind::Glyphs),
            other => Err(Error::Config(format!("unknown dataset kind `{other}` (points2d | glyphs8x8)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Points2d => "points2d",
            DatasetKind::Glyphs => "glyphs8x8",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Ordinary concepts, in label order.
    pub concepts: Vec<String>,
    /// Concept the sensitive samples belong to.
    pub main_concept: String,
    /// Label for the forbidden feature alone. Never has general samples.
    pub feature_concept: String,
    pub general_size: usize,
    pub sensitive_fraction: f64,
    pub noise_std: f64,
    /// Pixel value of the glyph mark.
    pub mark_value: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn sensitive_count(&self) -> usize {
        (self.sensitive_fraction * self.general_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.len() < 2 {
            return Err(Error::Config("dataset needs at least two concepts".into()));
        }
        if self.general_size == 0 {
            return Err(Error::Config("dataset.general_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sensitive_fraction) {
            return Err(Error::Config(format!("sensitive fraction {} outside [0, 1]", self.sensitive_fraction)));
        }
        if !self.concepts.contains(&self.main_concept) {
            return Err(Error::Config(format!("main concept `{}` is not declared", self.main_concept)));
        }
        if self.concepts.contains(&self.feature_concept) {
            return Err(Error::Config(format!("feature concept `{}` must not be an ordinary concept", self.feature_concept)));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.concepts.iter().all(|c| seen.insert(c)) {
            return Err(Error::Config("duplicate concept".into()));
        }
        if self.kind == DatasetKind::Glyphs && self.concepts.len() > GLYPHS.len() {
            return Err(Error::Config(format!("glyph mode has {} templates", GLYPHS.len())));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config("dataset.noise_std must be positive".into()));
        }
        Ok(())
    }

    /// Every concept id a model trained on this data must know.
    pub fn all_concepts(&self) -> Vec<String> {
        let mut ids = self.concepts.clone();
        ids.push(self.feature_concept.clone());
        ids
    }

    /// Suppress caption: the main concept together with the forbidden feature.
    pub fn feature_caption(&self) -> String {
        format!("{}{CAPTION_SEP}{}", self.main_concept, self.feature_concept)
    }

    fn main_index(&self) -> usize {
        self.concepts.iter().position(|c| *c == self.main_concept).expect("validated")
    }

    /// Centre of concept `k` in 2D mode.
    pub fn mode_center(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * std::f64::consts::PI * k as f64 / self.concepts.len() as f64;
        [RADIUS * a.cos(), RADIUS * a.sin()]
    }

    /// Centre and spread of the sensitive mode in 2D mode.
    pub fn sensitive_mode(&self) -> ([f64; 2], f64) {
        let c = self.mode_center(self.main_index());
        let s = SENSITIVE_RADIUS / RADIUS;
        ([c[0] * s, c[1] * s], self.noise_std / 3.0)
    }
}

const RADIUS: f64 = 3.0;
const SENSITIVE_RADIUS: f64 = 4.5;

/// Pixel offsets of the 2×2 mark.
pub const MARK_PIXELS: [usize; 4] = [8 + 5, 8 + 6, 16 + 5, 16 + 6];

const GLYPHS: [[&str; 8]; 8] = [
    ["..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."],
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
    ["########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"],
    ["########", "########", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."],
    ["#.......", ".#......", "..#.....", "...#....", "....#...", ".....#..", "......#.", ".......#"],
    ["##..##..", "##..##..", "##..##..", "##..##..", "##..##..", "##..##..", "##..##..", "##..##.."],
    ["........", "........", "########", "########", "........", "........", "########", "########"],
    ["#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.", "#......#"],
];

/// ±1 template for glyph concept `k`.
pub fn glyph_template(k: usize) -> Vec<f64> {
    GLYPHS[k].iter().flat_map(|row| row.bytes().map(|b| if b == b'#' { 1.0 } else { -1.0 })).collect()
}

/// Whether a glyph row carries the mark exactly.
pub fn has_mark(row: &[f64], mark_value: f64) -> bool {
    MARK_PIXELS.iter().all(|&p| row[p] == mark_value)
}

/// Row-major samples with one label each. May be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Empty("split"));
        }
        Tensor::matrix(self.len(), self.dim, self.data.clone())
    }

    /// Rows with the given label.
    pub fn of_concept(&self, concept: &str) -> Result<Tensor> {
        let rows: Vec<&[f64]> = (0..self.len()).filter(|&i| self.labels[i] == concept).map(|i| self.row(i)).collect();
        if rows.is_empty() {
            return Err(Error::Empty("concept rows"));
        }
        Tensor::stack_rows(&rows)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        writeln!(w, "label,{}", cols.join(","))?;
        for i in 0..self.len() {
            let vals: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", self.labels[i], vals.join(","))?;
        }
        Ok(())
    }
}

/// Sensitive samples with their caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitiveSplit {
    pub samples: Split,
    pub main_ids: Vec<String>,
    pub feat_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub general: Split,
    pub sensitive: SensitiveSplit,
}

pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.kind.data_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.concepts.len();
    let mut general = Split { dim, data: Vec::with_capacity(spec.general_size * dim), labels: Vec::new() };
    for i in 0..spec.general_size {
        let c = i % k;
        general.data.extend(concept_sample(spec, c, &mut rng));
        general.labels.push(spec.concepts[c].clone());
    }
    let m = spec.sensitive_count();
    let mut sens = Split { dim, data: Vec::with_capacity(m * dim), labels: Vec::new() };
    let composite = spec.feature_caption();
    for _ in 0..m {
        sens.data.extend(sensitive_sample(spec, &mut rng));
        sens.labels.push(composite.clone());
    }
    Ok(Dataset {
        spec: spec.clone(),
        general,
        sensitive: SensitiveSplit { samples: sens, main_ids: vec![spec.main_concept.clone(); m], feat_ids: vec![composite; m] },
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn concept_sample(spec: &DatasetSpec, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec.kind {
        DatasetKind::Points2d => {
            let c = spec.mode_center(k);
            vec![c[0] + spec.noise_std * gauss(rng), c[1] + spec.noise_std * gauss(rng)]
        }
        DatasetKind::Glyphs => glyph_template(k).into_iter().map(|v| v + spec.noise_std * gauss(rng)).collect(),
    }
}

fn sensitive_sample(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec.kind {
        DatasetKind::Points2d => {
            let (c, s) = spec.sensitive_mode();
            vec![c[0] + s * gauss(rng), c[1] + s * gauss(rng)]
        }
        DatasetKind::Glyphs => {
            let mut x = concept_sample(spec, spec.main_index(), rng);
            for p in MARK_PIXELS {
                x[p] = spec.mark_value;
            }
            x
        }
    }
}
