//! Checkpoint files.
//!
//! Layout: `"MMCK"`, version `u8 = 1`, three reserved zero bytes, a
//! little-endian `u32` manifest length, the UTF-8 JSON manifest, then every
//! parameter as little-endian `f32` values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::{Model, ModelConfig};
use crate::dataio::{ChannelStats, Vocab};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub model: ModelConfig,
    pub channels: [usize; 2],
    pub classes: usize,
    pub vocab: Vec<String>,
    pub stats: Vec<ChannelStats>,
    pub diffusion: DiffusionConfig,
    /// The full run configuration, kept verbatim.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        model: &Model<T>,
        stage: &str,
        vocab: &Vocab,
        stats: &[ChannelStats],
        diffusion: DiffusionConfig,
        config: serde_json::Value,
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                stage: stage.to_string(),
                model: model.config.clone(),
                channels: model.channels,
                classes: model.classes,
                vocab: vocab.tokens().to_vec(),
                stats: stats.to_vec(),
                diffusion,
                config,
                params,
            },
            tensors: model.params.tensors().iter().map(Tensor::cast).collect(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.manifest.vocab.clone(), self.manifest.model.context_len)
    }

    /// The stored parameters as a named set.
    pub fn param_set<T: Real>(&self) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        for (e, t) in self.manifest.params.iter().zip(&self.tensors) {
            ps.add(e.name.clone(), t.cast());
        }
        ps
    }

    /// Rebuilds the model exactly as saved.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let m = &self.manifest;
        let vocab = self.vocab();
        let mut model = Model::new(&m.model, m.channels, vocab.len(), vocab.eos(), m.classes, 0)?;
        let n = model.params.load_matching(&self.param_set::<T>(), "")?;
        if n != model.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {n} of the model's {} parameters",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(12 + manifest.len() + 4 * self.tensors.iter().map(Tensor::len).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 12 {
            return Err(fmt(bytes.len(), "truncated checkpoint header".into()));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "bad checkpoint magic".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {}", bytes[4])));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let end = 12 + len;
        if bytes.len() < end {
            return Err(fmt(12, format!("truncated manifest of {len} bytes")));
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[12..end]).map_err(|e| fmt(12, format!("bad manifest: {e}")))?;
        let mut pos = end;
        let mut tensors = Vec::with_capacity(manifest.params.len());
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let need = 4 * n;
            if bytes.len() < pos + need {
                return Err(fmt(pos, format!("truncated blob for `{}`", e.name)));
            }
            let data = bytes[pos..pos + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data).map_err(|_| fmt(pos, format!("bad shape for `{}`", e.name)))?);
            pos += need;
        }
        if pos != bytes.len() {
            return Err(fmt(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { manifest, tensors })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
