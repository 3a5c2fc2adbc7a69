//! Weight storage, seeded synthesis, and the `FVW1` binary format.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "FVW1" | version u32 = 1 | tensor count u32
//! per tensor: name len u16 | name bytes | rank u8 | dims u32 * rank | f32 data
//! ```
//!
//! Tensors appear in the order returned by [`tensor_names`].

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConfigError, ModelConfig};
use crate::numkernel::DenseMatrix;

pub const WEIGHT_MAGIC: &[u8; 4] = b"FVW1";
pub const WEIGHT_VERSION: u32 = 1;
/// Synthetic weights are uniform in `[-SYNTH_RANGE, SYNTH_RANGE]`.
pub const SYNTH_RANGE: f32 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    /// `vocab x d_model`
    pub embedding: DenseMatrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f32>,
    pub lnf_b: Vec<f32>,
    /// `d_model x vocab`
    pub out_proj: DenseMatrix,
}

/// Tensor names and shapes, in file order.
pub fn tensor_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m, v) = (config.d_model, config.d_ff, config.vocab);
    let mut out = vec![("embedding".to_owned(), vec![v, d])];
    for j in 1..=config.layers {
        for (name, dims) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("w1", vec![d, m]),
            ("w2", vec![m, d]),
        ] {
            out.push((format!("layer{j}.{name}"), dims));
        }
    }
    out.push(("ln_f.g".into(), vec![d]));
    out.push(("ln_f.b".into(), vec![d]));
    out.push(("out_proj".into(), vec![d, v]));
    out
}

impl WeightSet {
    /// Flat views of every tensor in file order.
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                &l.ln1_g[..],
                &l.ln1_b,
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.ln2_g,
                &l.ln2_b,
                l.w1.data(),
                l.w2.data(),
            ]);
        }
        out.extend([&self.lnf_g[..], &self.lnf_b, self.out_proj.data()]);
        out
    }

    /// Rebuilds a weight set from flat tensors in file order.
    fn from_tensors(config: &ModelConfig, mut flat: Vec<Vec<f32>>) -> Self {
        let (d, m, v) = (config.d_model, config.d_ff, config.vocab);
        let mat = |data: Vec<f32>, r, c| DenseMatrix::from_vec(r, c, data).expect("shape checked");
        flat.reverse();
        let mut next = || flat.pop().expect("tensor count checked");
        let embedding = mat(next(), v, d);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_g: next(),
                ln1_b: next(),
                wq: mat(next(), d, d),
                wk: mat(next(), d, d),
                wv: mat(next(), d, d),
                wo: mat(next(), d, d),
                ln2_g: next(),
                ln2_b: next(),
                w1: mat(next(), d, m),
                w2: mat(next(), m, d),
            })
            .collect();
        Self {
            embedding,
            layers,
            lnf_g: next(),
            lnf_b: next(),
            out_proj: mat(next(), d, v),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Maps a raw 32-bit draw to `[-SYNTH_RANGE, SYNTH_RANGE)` using its top 24 bits.
#[inline]
pub fn uniform_from_u32(raw: u32) -> f32 {
    let unit = (raw >> 8) as f32 * (1.0 / (1u32 << 24) as f32);
    (2.0 * unit - 1.0) * SYNTH_RANGE
}

/// Deterministic weights from `ChaCha8Rng::seed_from_u64(seed)`, drawn tensor
/// by tensor in file order. Matrices and biases take [`uniform_from_u32`]
/// directly; layer-norm gains are `1 +` that draw.
pub fn synth_weights(config: &ModelConfig, seed: u64) -> Result<WeightSet, ConfigError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = tensor_names(config)
        .into_iter()
        .map(|(name, dims)| {
            let len: usize = dims.iter().product();
            let offset = if name.ends_with(".g") { 1.0 } else { 0.0 };
            (0..len)
                .map(|_| offset + uniform_from_u32(rng.next_u32()))
                .collect()
        })
        .collect();
    Ok(WeightSet::from_tensors(config, flat))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightFormatError {
    #[error("byte {offset}: bad magic {found:?}")]
    Magic { offset: usize, found: Vec<u8> },
    #[error("byte {offset}: unsupported format version {version}")]
    Version { offset: usize, version: u32 },
    #[error("byte {offset}: file holds {found} tensors, config expects {expected}")]
    TensorCount {
        offset: usize,
        found: usize,
        expected: usize,
    },
    #[error("byte {offset}: truncated while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("byte {offset}: tensor `{found}` where `{expected}` was expected")]
    Name {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("byte {offset}: tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    Shape {
        offset: usize,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("byte {offset}: {extra} trailing bytes after last tensor")]
    Trailing { offset: usize, extra: usize },
    #[error("{0}")]
    Io(String),
}

pub fn encode_weights(ws: &WeightSet, config: &ModelConfig) -> Vec<u8> {
    let names = tensor_names(config);
    let tensors = ws.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for ((name, dims), data) in names.iter().zip(tensors) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightFormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightFormatError::Truncated {
                offset: self.pos,
                what: what.to_owned(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightFormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8], config: &ModelConfig) -> Result<WeightSet, WeightFormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(WeightFormatError::Magic {
            offset: 0,
            found: magic.to_vec(),
        });
    }
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(WeightFormatError::Version { offset: 4, version });
    }
    let expected = tensor_names(config);
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(WeightFormatError::TensorCount {
            offset: 8,
            found: count,
            expected: expected.len(),
        });
    }
    let mut flat = Vec::with_capacity(count);
    for (want_name, want_dims) in &expected {
        let start = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(r.take(len, "tensor name")?).into_owned();
        if &name != want_name {
            return Err(WeightFormatError::Name {
                offset: start,
                expected: want_name.clone(),
                found: name,
            });
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of `{name}`"))? as usize);
        }
        if &dims != want_dims {
            return Err(WeightFormatError::Shape {
                offset: start,
                name,
                expected: want_dims.clone(),
                found: dims,
            });
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("data of `{name}`"))?;
        flat.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(WeightFormatError::Trailing {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(WeightSet::from_tensors(config, flat))
}

pub fn save_weights(
    ws: &WeightSet,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<(), WeightFormatError> {
    std::fs::write(path.as_ref(), encode_weights(ws, config))
        .map_err(|e| WeightFormatError::Io(format!("{}: {e}", path.as_ref().display())))
}

pub fn load_weights(
    path: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<WeightSet, WeightFormatError> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| WeightFormatError::Io(format!("{}: {e}", path.as_ref().display())))?;
    decode_weights(&bytes, config)
}
