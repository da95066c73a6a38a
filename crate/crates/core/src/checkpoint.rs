//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "TAGSPACE"
//! version      u32       currently 1
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON (configs, vocabulary, provenance)
//! n_arrays     u32
//! manifest     n_arrays × { name_len u16, name, dtype u8 (1 = f32, 2 = f64),
//!                           ndim u8, ndim × u64 dims }
//! arrays       raw row-major element data, in manifest order
//! ```
//!
//! Nothing may follow the last array. See `docs/checkpoint-format.md`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diff::{NdArray, ParameterStore};
use crate::dsp::DspConfig;
use crate::encoder::EncoderConfig;
use crate::model::JointModel;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"TAGSPACE";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}; expected one of {expected:?}")]
    Version { found: u32, expected: Vec<u32> },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint stores {stored} parameters, caller requested {requested}")]
    DType {
        stored: &'static str,
        requested: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_completed: usize,
    /// Ids of the tracks the model was trained on.
    pub train_track_ids: Vec<String>,
    /// Effective run configuration as ordered `key = value` pairs.
    pub run_config: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint<S> {
    pub encoder: EncoderConfig,
    pub dsp: DspConfig,
    pub word_dim: usize,
    pub params: ParameterStore<S>,
    /// Tag vocabulary used in training, in vocabulary order.
    pub vocab: Vec<String>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    encoder: EncoderConfig,
    dsp: DspConfig,
    word_dim: usize,
    joint_dim: usize,
    vocab: Vec<String>,
    training: TrainingMeta,
}

impl<S: Scalar> ModelCheckpoint<S> {
    pub fn joint_dim(&self) -> usize {
        self.encoder.joint_dim
    }

    pub fn model(&self) -> Result<JointModel> {
        JointModel::new(self.encoder.clone(), self.word_dim)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&MetaBlock {
            encoder: self.encoder.clone(),
            dsp: self.dsp,
            word_dim: self.word_dim,
            joint_dim: self.joint_dim(),
            vocab: self.vocab.clone(),
            training: self.meta.clone(),
        })
        .expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, array) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(S::DTYPE as u8);
            out.push(array.shape().len() as u8);
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, array) in self.params.iter() {
            for &x in array.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Short hex digest of the serialised checkpoint.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn save_checkpoint<S: Scalar, W: Write>(checkpoint: &ModelCheckpoint<S>, mut sink: W) -> Result<()> {
    sink.write_all(&checkpoint.to_bytes())?;
    sink.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn to_usize(x: u64, what: &str) -> Result<usize> {
    usize::try_from(x).map_err(|_| CheckpointError::Corrupt(format!("{what} too large")))
}

/// Parses a whole checkpoint; any inconsistency is an error and nothing
/// partial is returned.
pub fn checkpoint_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelCheckpoint<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.take(MAGIC.len(), "magic")?;
    let version = r.u32("version")?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(CheckpointError::Version {
            found: version,
            expected: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let meta_len = to_usize(r.u64("metadata length")?, "metadata length")?;
    let meta: MetaBlock = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    if meta.joint_dim != meta.encoder.joint_dim {
        return Err(CheckpointError::Corrupt(format!(
            "joint dimension {} disagrees with encoder config {}",
            meta.joint_dim, meta.encoder.joint_dim
        )));
    }

    let count = r.u32("array count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let what = format!("manifest record {i}");
        let name_len = r.u16(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| CheckpointError::Corrupt(format!("{what}: name is not UTF-8")))?
            .to_string();
        let code = r.u8(&what)?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: unknown element type {code}")))?;
        if dtype != S::DTYPE {
            return Err(CheckpointError::DType {
                stored: dtype.name(),
                requested: S::DTYPE.name(),
            });
        }
        let ndim = r.u8(&what)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64(&what).and_then(|d| to_usize(d, "dimension")))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }

    let mut params = ParameterStore::new();
    let width = S::DTYPE.size();
    for (name, shape) in manifest {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflows")))?;
        let raw = r.take(n, &format!("array {name}"))?;
        let data: Vec<S> = raw.chunks_exact(width).map(S::read_le).collect();
        if params.contains(&name) {
            return Err(CheckpointError::Corrupt(format!("duplicate array {name}")));
        }
        params.insert(
            name.clone(),
            NdArray::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
        );
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the last array",
            bytes.len() - r.pos
        )));
    }

    let checkpoint = ModelCheckpoint {
        encoder: meta.encoder,
        dsp: meta.dsp,
        word_dim: meta.word_dim,
        params,
        vocab: meta.vocab,
        meta: meta.training,
    };
    checkpoint
        .model()?
        .check_params(&checkpoint.params)
        .map_err(CheckpointError::Corrupt)?;
    Ok(checkpoint)
}

pub fn load_checkpoint<S: Scalar, R: Read>(mut source: R) -> Result<ModelCheckpoint<S>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
