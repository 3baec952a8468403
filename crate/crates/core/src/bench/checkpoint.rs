//! Binary model container.
//!
//! Layout: magic `SFCK`, `u32` format version, `u64` header length, a JSON
//! header describing every array, the little-endian `f64` payloads, and a
//! trailing SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::{ChannelLayout, Standardizer};
use crate::draft::DraftModel;
use crate::error::{Error, Result};
use crate::flowpolicy::{Encoder, MainPolicy, VelocityField};
use crate::nn::Mlp;
use crate::runtime::Models;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset in elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftMeta {
    pub world_norm: Standardizer,
    pub state_norm: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub layout: ChannelLayout,
    pub horizon: usize,
    pub num_tasks: usize,
    pub action_norm: Standardizer,
    pub world_norm: Standardizer,
    pub state_norm: Standardizer,
    pub time_floor: f64,
    pub draft: Option<DraftMeta>,
    pub arrays: Vec<ArrayEntry>,
    /// Configuration the models were trained with.
    pub config: serde_json::Value,
    /// Named seeds that produced the models, in the order they were used.
    pub seeds: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: Models,
    pub config: serde_json::Value,
    pub seeds: Vec<(String, u64)>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let m = &self.models;
        let mut out = m.main.encoder.net.named_arrays("encoder");
        out.extend(m.main.field.net.named_arrays("field"));
        if let Some(d) = &m.draft {
            out.extend(d.net.named_arrays("draft"));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.models;
        let arrays = self.arrays();
        let mut entries = Vec::with_capacity(arrays.len());
        let mut offset = 0;
        for (name, shape, data) in &arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f64".into(),
                offset,
            });
            offset += data.len();
        }
        let header = Header {
            layout: m.main.field.layout,
            horizon: m.main.field.horizon,
            num_tasks: m.main.encoder.num_tasks,
            action_norm: m.action_norm.clone(),
            world_norm: m.main.encoder.world_norm.clone(),
            state_norm: m.main.field.state_norm.clone(),
            time_floor: m.main.field.time_floor,
            draft: m.draft.as_ref().map(|d| DraftMeta {
                world_norm: d.world_norm.clone(),
                state_norm: d.state_norm.clone(),
            }),
            arrays: entries,
            config: self.config.clone(),
            seeds: self.seeds.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(header.len() + offset * 8 + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, _, data) in &arrays {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(corrupt(path, "file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch (truncated or corrupted file)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(
                path,
                format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
            ));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt(path, "header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[16..payload_start])
            .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let payload = &body[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(corrupt(path, "payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut table: BTreeMap<&str, (&[usize], &[f64])> = BTreeMap::new();
        for a in &header.arrays {
            if a.dtype != "f64" {
                return Err(corrupt(path, format!("array {} has unsupported dtype {}", a.name, a.dtype)));
            }
            let n: usize = a.shape.iter().product();
            let data = values
                .get(a.offset..a.offset + n)
                .ok_or_else(|| corrupt(path, format!("array {} runs past the payload", a.name)))?;
            table.insert(&a.name, (&a.shape, data));
        }
        let lookup = |prefix: &str| {
            let t = &table;
            Mlp::from_named_arrays(prefix, |name| t.get(name).copied())
                .map_err(|e| corrupt(path, format!("{prefix}: {e}")))
        };
        let main = MainPolicy {
            encoder: Encoder {
                net: lookup("encoder")?,
                num_tasks: header.num_tasks,
                world_norm: header.world_norm.clone(),
            },
            field: VelocityField {
                net: lookup("field")?,
                horizon: header.horizon,
                layout: header.layout,
                state_norm: header.state_norm.clone(),
                time_floor: header.time_floor,
            },
        };
        let draft = match &header.draft {
            Some(meta) => Some(DraftModel {
                net: lookup("draft")?,
                layout: header.layout,
                horizon: header.horizon,
                num_tasks: header.num_tasks,
                world_norm: meta.world_norm.clone(),
                state_norm: meta.state_norm.clone(),
            }),
            None => None,
        };
        Ok(Self {
            models: Models {
                main,
                draft,
                action_norm: header.action_norm,
            },
            config: header.config,
            seeds: header.seeds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}
