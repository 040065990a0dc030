//! On-disk formats and dataset handling.
//!
//! * Captions: JSON lines, `{"image_id": "...", "caption": "..."}`.
//! * FEAT1 image features: `"FEAT1"`, u32 LE count, u32 LE dim, then per
//!   record a u16 LE id length, the UTF-8 id, and `dim` f32 LE values.
//! * MCAP1 checkpoints: `"MCAP1"`, u32 LE version, u32 LE metadata length,
//!   JSON metadata (config, tensor manifest, vocabulary hash), then every
//!   tensor as f32 LE in manifest order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

pub fn parse_captions(text: &str) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ParseError { line: i + 1, msg };
        let rec: CaptionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.image_id.is_empty() {
            return Err(err("empty image_id".into()));
        }
        if rec.caption.trim().is_empty() {
            return Err(err("empty caption".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_captions(&text)
}

pub fn captions_to_string(records: &[CaptionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("caption record serializes"));
        s.push('\n');
    }
    s
}

pub fn save_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    std::fs::write(path, captions_to_string(records)).map_err(|e| Error::io(path, e))
}

pub const FEAT_MAGIC: &[u8; 5] = b"FEAT1";
pub const CKPT_MAGIC: &[u8; 5] = b"MCAP1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl Features {
    pub fn new(dim: usize) -> Self {
        Features {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Encodes records sorted by id.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        let mut out = Vec::with_capacity(13 + ids.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(FEAT_MAGIC);
        out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in ids {
            let v = &self.vectors[id];
            if v.len() != self.dim {
                return Err(Error::shape(format!(
                    "feature {id:?} has length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            let len = u16::try_from(id.len())
                .map_err(|_| Error::FormatError(format!("id {id:?} longer than 65535 bytes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(5).ok() != Some(&FEAT_MAGIC[..]) {
            return Err(Error::FormatError("missing FEAT1 magic".into()));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut feats = Features::new(dim);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::FormatError("id is not UTF-8".into()))?
                .to_owned();
            let v = r.f32s(dim)?;
            if feats.vectors.contains_key(&id) {
                return Err(Error::DuplicateId(id));
            }
            feats.vectors.insert(id, v);
        }
        if !r.is_empty() {
            return Err(Error::FormatError(format!(
                "{} trailing bytes after {count} records",
                r.remaining()
            )));
        }
        Ok(feats)
    }
}

pub fn load_features(path: &Path) -> Result<Features> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Features::from_bytes(&bytes)
}

pub fn save_features(path: &Path, features: &Features) -> Result<()> {
    std::fs::write(path, features.to_bytes()?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedFile(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::FormatError("dimension overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Image ids of each partition. Both captions of an image land together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Shuffles `ids` with `seed` and cuts them into train, val and test.
pub fn split_dataset(ids: &[String], counts: (usize, usize, usize), seed: u64) -> Result<DatasetSplit> {
    let (tr, va, te) = counts;
    if tr + va + te != ids.len() {
        return Err(Error::SplitError(format!(
            "counts {tr}+{va}+{te} do not sum to {} ids",
            ids.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::SplitError(format!("duplicate id {dup:?}")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(tr + va);
    let val = shuffled.split_off(tr);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
    })
}

/// Partition sizes as explicit counts (`7154,1000,1000`) or ratios
/// (`0.8,0.1,0.1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    Counts(usize, usize, usize),
    Ratios(f64, f64, f64),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Counts(7154, 1000, 1000)
    }
}

impl FromStr for SplitSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated values, got {s:?}"));
        }
        if parts.iter().any(|p| p.contains('.')) {
            let r: Vec<f64> = parts
                .iter()
                .map(|p| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(format!("ratios {s:?} must lie in [0,1] and sum to 1"));
            }
            Ok(SplitSpec::Ratios(r[0], r[1], r[2]))
        } else {
            let c: Vec<usize> = parts
                .iter()
                .map(|p| p.parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            Ok(SplitSpec::Counts(c[0], c[1], c[2]))
        }
    }
}

impl SplitSpec {
    /// Counts for `n` images. Ratios floor train and val; test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        match *self {
            SplitSpec::Counts(a, b, c) => (a, b, c),
            SplitSpec::Ratios(a, b, _) => {
                let tr = ((a * n as f64) + 1e-9).floor() as usize;
                let va = (((b * n as f64) + 1e-9).floor() as usize).min(n - tr.min(n));
                let tr = tr.min(n);
                (tr, va, n - tr - va)
            }
        }
    }
}

/// Captions grouped by image id.
pub fn group_by_image(records: &[CaptionRecord]) -> BTreeMap<String, Vec<String>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        m.entry(r.image_id.clone()).or_default().push(r.caption.clone());
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab_hash: String,
}

pub fn checkpoint_to_bytes(params: &ModelParams<f32>, vocab_hash: &str) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: params.config.clone(),
        tensors: params
            .config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry {
                name: name.to_owned(),
                shape,
            })
            .collect(),
        vocab_hash: vocab_hash.to_owned(),
    };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::with_capacity(13 + meta.len() + 4 * params.num_params());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for t in params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decodes a checkpoint, refusing it when `expected_vocab_hash` is given
/// and differs from the stored one.
pub fn checkpoint_from_bytes(bytes: &[u8], expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(5)
        .map_err(|_| Error::FormatError("file too short for MCAP1 magic".into()))?;
    if magic != CKPT_MAGIC {
        return Err(Error::FormatError("missing MCAP1 magic".into()));
    }
    let corrupt = |e: Error| match e {
        Error::TruncatedFile(m) => Error::FormatError(format!("truncated checkpoint: {m}")),
        other => other,
    };
    let version = r.u32().map_err(corrupt)?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let meta_len = r.u32().map_err(corrupt)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len).map_err(corrupt)?)
        .map_err(|e| Error::FormatError(format!("checkpoint metadata: {e}")))?;
    meta.config
        .validate()
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;

    let expected: Vec<TensorEntry> = meta
        .config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| TensorEntry {
            name: name.to_owned(),
            shape,
        })
        .collect();
    if expected != meta.tensors {
        return Err(Error::ShapeMismatch(format!(
            "manifest {:?} does not match config (expected {:?})",
            meta.tensors, expected
        )));
    }
    if let Some(h) = expected_vocab_hash {
        if h != meta.vocab_hash {
            return Err(Error::VocabMismatch {
                checkpoint: meta.vocab_hash,
                vocab: h.to_owned(),
            });
        }
    }

    let mut params = ModelParams::<f32>::zeros(&meta.config);
    for t in params.tensors_mut() {
        let v = r.f32s(t.len()).map_err(corrupt)?;
        t.copy_from_slice(&v);
    }
    if !r.is_empty() {
        return Err(Error::FormatError(format!(
            "{} trailing bytes after tensors",
            r.remaining()
        )));
    }
    if !params.all_finite() {
        return Err(Error::FormatError("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        params,
        vocab_hash: meta.vocab_hash,
    })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, vocab_hash: &str) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params, vocab_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected_vocab_hash)
}
