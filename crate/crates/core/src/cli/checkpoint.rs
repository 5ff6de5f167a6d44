//! Binary training checkpoints.
//!
//! Layout: the magic line, a little-endian `u64` header length, a JSON
//! header, then every tensor listed in the header as little-endian `f64`
//! in header order. The header carries the run's config text and digest,
//! the effective model and adapter configs, training progress including
//! the RNG streams, and the optimizer step.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llltrain::{LllConfig, Progress, TrainerState};
use crate::numcore::optim::{AdamWConfig, AdamWState};
use crate::numcore::params::ParamStore;
use crate::numcore::tensor::Tensor;
use crate::rvae::RvaeConfig;
use crate::tinylm::ModelConfig;

const MAGIC: &[u8] = b"LLLCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_digest: String,
    stage_label: String,
    config_text: String,
    model: ModelConfig,
    rvae: Option<RvaeConfig>,
    lll: LllConfig,
    progress: Progress,
    optimizer_step: u64,
    optimizer_config: AdamWConfig,
    tensors: Vec<TensorEntry>,
}

/// A saved trainer together with what is needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    /// Human-readable position, such as `stage 1 (span) epoch 3`.
    pub stage_label: String,
    /// The run's config file as written to its output directory.
    pub config_text: String,
    /// Model config with the vocabulary size resolved.
    pub model: ModelConfig,
    pub rvae: Option<RvaeConfig>,
    pub lll: LllConfig,
    pub state: TrainerState,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (m, v) = self.state.optimizer.moments();
        let mut tensors = Vec::new();
        let mut blobs: Vec<&[f64]> = Vec::new();
        for (name, t) in self.state.params.iter() {
            tensors.push(TensorEntry {
                group: Group::Param,
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            blobs.push(t.data());
        }
        for (group, map) in [(Group::AdamM, m), (Group::AdamV, v)] {
            for (name, data) in map {
                tensors.push(TensorEntry {
                    group,
                    name: name.clone(),
                    shape: vec![data.len()],
                });
                blobs.push(data);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config_digest: self.config_digest.clone(),
            stage_label: self.stage_label.clone(),
            config_text: self.config_text.clone(),
            model: self.model.clone(),
            rvae: self.rvae.clone(),
            lll: self.lll.clone(),
            progress: self.state.progress.clone(),
            optimizer_step: self.state.optimizer.step,
            optimizer_config: self.state.optimizer.config,
            tensors,
        };
        let h = serde_json::to_vec(&header)?;
        let n: usize = blobs.iter().map(|b| b.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + h.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for b in blobs {
            for x in b {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| corrupt(path, "not a checkpoint file"))?;
        if rest.len() < 8 {
            return Err(corrupt(path, "truncated header"));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(corrupt(path, "truncated header"));
        }
        let (h, mut body) = rest.split_at(len);
        let header: Header = serde_json::from_slice(h).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(
                path,
                format!("format version {} (expected {FORMAT_VERSION})", header.format_version),
            ));
        }
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if body.len() < 8 * n {
                return Err(corrupt(path, format!("truncated data for `{}`", e.name)));
            }
            let (chunk, tail) = body.split_at(8 * n);
            body = tail;
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match e.group {
                Group::Param => params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?),
                Group::AdamM => {
                    m.insert(e.name.clone(), data);
                }
                Group::AdamV => {
                    v.insert(e.name.clone(), data);
                }
            }
        }
        if !body.is_empty() {
            return Err(corrupt(path, "trailing bytes after tensor data"));
        }
        let optimizer = AdamWState::from_moments(header.optimizer_step, header.optimizer_config, m, v)
            .map_err(|e| corrupt(path, e.to_string()))?;
        Ok(Self {
            config_digest: header.config_digest,
            stage_label: header.stage_label,
            config_text: header.config_text,
            model: header.model,
            rvae: header.rvae,
            lll: header.lll,
            state: TrainerState {
                params,
                optimizer,
                progress: header.progress,
            },
        })
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}
