//! Weight checkpoints: one file holding a JSON manifest and every named
//! parameter array as little-endian `f64`.
//!
//! Layout: `"DCKP"`, format version (u32 LE), manifest length (u32 LE),
//! manifest JSON, then the arrays in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DcicError, Result};
use crate::model::Model;
use crate::real::Real;
use crate::transforms::{ChannelPlan, ConditioningFlags};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub plan: ChannelPlan,
    pub flags: ConditioningFlags,
    pub lambda: f64,
    pub quality_tag: u8,
    pub distortion: String,
    pub steps: u64,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
}

/// Metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub lambda: f64,
    pub quality_tag: u8,
    pub distortion: String,
    pub steps: u64,
    pub seed: u64,
}

/// First 8 bytes of the SHA-256 of the checkpoint file.
pub fn model_id(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    d[..8].try_into().unwrap()
}

pub fn to_bytes<T: Real>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let arrays = model.params.export();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        plan: model.plan,
        flags: model.flags,
        lambda: meta.lambda,
        quality_tag: meta.quality_tag,
        distortion: meta.distortion.clone(),
        steps: meta.steps,
        seed: meta.seed,
        arrays: arrays.iter().map(|(n, (s, _))| ArrayEntry { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| DcicError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, (_, data)) in arrays {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f64>, Manifest)> {
    if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DcicError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DcicError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| DcicError::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| DcicError::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(DcicError::Version { found: manifest.format_version, expected: CHECKPOINT_VERSION });
    }
    let mut model = Model::<f64>::new(manifest.plan, manifest.flags, 0)?;
    let mut pos = 12 + len;
    let mut values = BTreeMap::new();
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| DcicError::Checkpoint(format!("truncated array {}", entry.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.insert(entry.name.clone(), (entry.shape.clone(), data));
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(DcicError::Checkpoint("trailing bytes after the last array".into()));
    }
    model.params.import(&values)?;
    Ok((model, manifest))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<[u8; 8]> {
    let bytes = to_bytes(model, meta)?;
    write_atomic(path, &bytes)?;
    Ok(model_id(&bytes))
}

/// Loads a checkpoint and returns the model, its manifest and its id.
pub fn load(path: &Path) -> Result<(Model<f64>, Manifest, [u8; 8])> {
    let bytes = fs::read(path)?;
    let (m, man) = from_bytes(&bytes)?;
    Ok((m, man, model_id(&bytes)))
}
