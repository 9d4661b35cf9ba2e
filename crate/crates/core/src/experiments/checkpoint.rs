//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! ```text
//! "SGRD" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
//! u32 segment_count
//! per segment: u32 name_len | name | u32 ndim | u64 dims.. | f64 data..
//! u64 FNV-1a of every preceding byte
//! ```
//! Metadata holds the stage tag, model spec, concept ids, schedule and RNG
//! state. Floats are written with Rust's shortest round-trip formatting, so
//! encoding is a pure function of the checkpoint and save→load→save is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experiments::config::ScheduleSpec;
use crate::model::{ConceptTable, Denoiser, LowRankAdapter, Model, ModelSpec};
use crate::tensor::{ParamVector, Tensor};

pub const MAGIC: &[u8; 4] = b"SGRD";
pub const VERSION: u32 = 1;
const TABLE_SEGMENT: &str = "emb.table";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `init`, `pretrained`, `naive`, `projected`, ...
    pub stage: String,
    pub model: Model,
    pub schedule: ScheduleSpec,
    pub rng: Option<RngState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    fn metadata(&self) -> String {
        let spec = self.model.spec();
        let mut meta = BTreeMap::new();
        meta.insert("stage", self.stage.clone());
        meta.insert("model.data_dim", spec.data_dim.to_string());
        meta.insert("model.width", spec.width.to_string());
        meta.insert("model.embed_dim", spec.embed_dim.to_string());
        meta.insert("concepts", self.model.concepts.ids().join(","));
        meta.insert("schedule.steps", self.schedule.steps.to_string());
        meta.insert("schedule.beta_start", self.schedule.beta_start.to_string());
        meta.insert("schedule.beta_end", self.schedule.beta_end.to_string());
        if let Some(r) = &self.rng {
            meta.insert("rng.seed", hex(&r.seed));
            meta.insert("rng.stream", r.stream.to_string());
            meta.insert("rng.word_pos", r.word_pos.to_string());
        }
        meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn segments(&self) -> Vec<(String, Tensor)> {
        let mut segs: Vec<(String, Tensor)> = self.model.denoiser.base().segments().to_vec();
        for ad in self.model.denoiser.adapters() {
            segs.push((format!("{}.lora_a", ad.layer), ad.a.clone()));
            segs.push((format!("{}.lora_b", ad.layer), ad.b.clone()));
        }
        segs.push((TABLE_SEGMENT.to_string(), self.model.concepts.table().clone()));
        segs
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.metadata();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let segs = self.segments();
        out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
        for (name, t) in &segs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Decodes bytes; `path` only labels diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, limit: bytes.len(), path };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail(0, format!("bad magic {:?}, expected {:?}", &bytes[..4], MAGIC)));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < r.pos + 8 {
            return Err(r.fail(r.pos, "truncated before checksum".into()));
        }
        let body_len = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        r.limit = body_len;

        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta_text = std::str::from_utf8(meta_bytes).map_err(|_| r.fail(meta_at, "metadata is not UTF-8".into()))?;
        let meta: BTreeMap<&str, &str> = meta_text.lines().filter_map(|l| l.split_once('=')).collect();

        let count = r.u32("segment count")? as usize;
        let mut segs = Vec::with_capacity(count.min(64));
        for i in 0..count {
            let what = format!("segment {i}");
            let name_len = r.u32(&what)? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| r.fail(name_at, format!("{what} name is not UTF-8")))?
                .to_string();
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let n: usize = shape.iter().product();
            let data_at = r.pos;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail(data_at, format!("{name}: shape overflows")))?, &name)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            segs.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body_len {
            return Err(r.fail(r.pos, format!("{} unexpected bytes before checksum", body_len as i64 - r.pos as i64)));
        }
        let actual = fnv1a(&bytes[..body_len]);
        if actual != stored {
            return Err(r.fail(body_len, format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
        }
        build(meta, segs).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    cp.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// End of readable bytes; excludes the checksum once it is located.
    limit: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, detail: String) -> Error {
        Error::Checkpoint { path: self.path.to_path_buf(), detail: format!("at byte {offset}: {detail}") }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&end| end <= self.limit) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!("truncated reading {what}: need {n} bytes, {} available", self.limit - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::Config(format!("metadata lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::Config(format!("metadata `{key}` is malformed")))
}

fn build(meta: BTreeMap<&str, &str>, segs: Vec<(String, Tensor)>) -> Result<Checkpoint> {
    let spec = ModelSpec {
        data_dim: field(&meta, "model.data_dim")?,
        width: field(&meta, "model.width")?,
        embed_dim: field(&meta, "model.embed_dim")?,
    };
    let schedule = ScheduleSpec {
        steps: field(&meta, "schedule.steps")?,
        beta_start: field(&meta, "schedule.beta_start")?,
        beta_end: field(&meta, "schedule.beta_end")?,
    };
    let rng = match meta.get("rng.seed") {
        Some(s) => Some(RngState {
            seed: unhex(s).ok_or_else(|| Error::Config("metadata `rng.seed` is malformed".into()))?,
            stream: field(&meta, "rng.stream")?,
            word_pos: field(&meta, "rng.word_pos")?,
        }),
        None => None,
    };
    let concepts: Vec<String> = field::<String>(&meta, "concepts")?.split(',').map(String::from).collect();

    let mut base = Vec::new();
    // Adapters keep file order so re-encoding is identical.
    let mut lora: Vec<(String, Option<Tensor>, Option<Tensor>)> = Vec::new();
    let mut table = None;
    for (name, t) in segs {
        if name == TABLE_SEGMENT {
            table = Some(t);
        } else if let Some((layer, part)) = name.split_once(".lora_") {
            if !lora.iter().any(|(l, ..)| l == layer) {
                lora.push((layer.to_string(), None, None));
            }
            let slot = lora.iter_mut().find(|(l, ..)| l == layer).expect("inserted");
            match part {
                "a" => slot.1 = Some(t),
                "b" => slot.2 = Some(t),
                _ => return Err(Error::LayoutMismatch(format!("unknown segment `{name}`"))),
            }
        } else {
            base.push((name, t));
        }
    }
    let mut adapters = Vec::new();
    for (layer, a, b) in lora {
        let (a, b) = a.zip(b).ok_or_else(|| Error::LayoutMismatch(format!("adapter on {layer} lacks a factor")))?;
        if a.shape().len() != 2 {
            return Err(Error::LayoutMismatch(format!("adapter on {layer} is not a matrix")));
        }
        adapters.push(LowRankAdapter { rank: a.shape()[0], layer, a, b });
    }
    let table = table.ok_or_else(|| Error::LayoutMismatch(format!("missing `{TABLE_SEGMENT}` segment")))?;
    let model = Model {
        denoiser: Denoiser::from_parts(spec, ParamVector::new(base)?, adapters)?,
        concepts: ConceptTable::from_parts(concepts, table)?,
    };
    Ok(Checkpoint { stage: field(&meta, "stage")?, model, schedule, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::train::stream_rng;
    use rand::Rng;

    fn sample_checkpoint(adapters: bool) -> Checkpoint {
        let mut rng = stream_rng(11, 1);
        let spec = ModelSpec { data_dim: 3, width: 5, embed_dim: 4 };
        let mut model = Model::new(spec, vec!["a".into(), "b".into(), "f".into()], &mut rng).unwrap();
        if adapters {
            model.denoiser.attach_adapters(2, &["l3", "l1"], &mut rng).unwrap();
        }
        let _: u64 = rng.random();
        Checkpoint {
            stage: "pretrained".into(),
            model,
            schedule: ScheduleSpec { steps: 20, beta_start: 1e-4, beta_end: 0.1 },
            rng: Some(RngState::capture(&rng)),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for adapters in [false, true] {
            let cp = sample_checkpoint(adapters);
            let bytes = cp.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back.stage, cp.stage);
            assert_eq!(back.schedule, cp.schedule);
            assert_eq!(back.rng, cp.rng);
            assert_eq!(back.model.concepts, cp.model.concepts);
            assert_eq!(back.model.denoiser.base().checksum(), cp.model.denoiser.base().checksum());
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = stream_rng(5, 3);
        let _: [u64; 7] = rng.random();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = resumed.random();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.sgrd");
        let cp = sample_checkpoint(true);
        save_checkpoint(&p, &cp).unwrap();
        let back = load_checkpoint(&p).unwrap();
        save_checkpoint(&dir.path().join("y.sgrd"), &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("y.sgrd")).unwrap());
    }

    #[test]
    fn corruption_is_rejected_with_offsets() {
        let bytes = sample_checkpoint(false).to_bytes();
        let p = Path::new("c.sgrd");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("bad magic"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("version 9"));

        for cut in [2, 10, bytes.len() / 2, bytes.len() - 9] {
            let err = Checkpoint::from_bytes(&bytes[..cut], p).unwrap_err().to_string();
            assert!(err.contains("at byte"), "cut {cut}: {err}");
        }

        let mut bad = bytes.clone();
        let mid = bytes.len() - 20;
        bad[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("checksum"));
    }
}
