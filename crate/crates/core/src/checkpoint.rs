//! Named-tensor checkpoint files.
//!
//! Layout: the 8-byte magic `DRUECKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! tensor as raw little-endian `f32` values in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DrueError, Result};
use crate::nn::Param;

const MAGIC: &[u8; 8] = b"DRUECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Hash of the encoder architecture the tensors belong to.
    pub arch_hash: String,
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> DrueError {
    DrueError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_checkpoint(
    path: &Path,
    arch_hash: &str,
    kind: &str,
    params: &[&Param<f32>],
    metadata: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        arch_hash: arch_hash.to_string(),
        kind: kind.to_string(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = params.iter().map(|p| p.value.len()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in params {
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| DrueError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DrueError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| DrueError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| ckpt_err(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    let mut offset = 20 + hlen;
    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| ckpt_err(path, format!("truncated tensor {}", t.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(t.name.clone(), values);
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after last tensor"));
    }
    Ok(CheckpointFile { header, tensors })
}

impl CheckpointFile {
    pub fn expect_arch(&self, path: &Path, arch_hash: &str) -> Result<()> {
        if self.header.arch_hash != arch_hash {
            return Err(ckpt_err(
                path,
                format!(
                    "architecture hash {} does not match the configured model {arch_hash}",
                    self.header.arch_hash
                ),
            ));
        }
        Ok(())
    }

    /// Copies stored values into `params`, checking names and shapes.
    pub fn load_into(&self, path: &Path, params: Vec<&mut Param<f32>>) -> Result<()> {
        for p in params {
            let values = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| ckpt_err(path, format!("missing tensor {}", p.name)))?;
            if values.len() != p.value.len() {
                return Err(ckpt_err(
                    path,
                    format!(
                        "tensor {} has {} values, expected {}",
                        p.name,
                        values.len(),
                        p.value.len()
                    ),
                ));
            }
            p.value.copy_from_slice(values);
        }
        Ok(())
    }
}
