//! Checkpoint directories: `manifest.json` (format version, step, config
//! hash, entry table, payload digest) next to `payload.bin`, the
//! concatenated little-endian f32 values of every entry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Free-form metadata such as the prototype region grid.
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub payload_sha256: String,
    pub entries: Vec<EntryMeta>,
}

/// In-memory checkpoint: named f32 tensors plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Map<String, serde_json::Value>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(step: u64, config_hash: impl Into<String>, config: serde_json::Value) -> Self {
        Checkpoint {
            step,
            config_hash: config_hash.into(),
            config,
            meta: Default::default(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!("entry `{name}`"), n, values.len()));
        }
        self.tensors.insert(name, (shape, values));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a [usize], &'a [f32])> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(k, (s, v))| k.strip_prefix(prefix).map(|rest| (rest, s.as_slice(), v.as_slice())))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    /// Write to `dir` via a sibling temporary directory and a rename.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{}.tmp",
            dir.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint")
        ));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, (shape, values)) in &self.tensors {
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(EntryMeta {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: values.len(),
            });
            offset += values.len();
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT,
            step: self.step,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            entries,
        };
        fs::write(tmp.join(PAYLOAD_FILE), &payload)?;
        fs::write(tmp.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Read and verify a checkpoint directory.
    pub fn read(dir: &Path) -> Result<Self> {
        let bad = |reason: String| Error::checkpoint(dir, reason);
        let text = fs::read(dir.join(MANIFEST_FILE)).map_err(|e| bad(format!("manifest: {e}")))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&text).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let payload = fs::read(dir.join(PAYLOAD_FILE)).map_err(|e| bad(format!("payload: {e}")))?;
        let digest = hex::encode(Sha256::digest(&payload));
        if digest != manifest.payload_sha256 {
            return Err(bad("payload digest mismatch".into()));
        }
        if payload.len() % 4 != 0 {
            return Err(bad("payload length is not a multiple of 4".into()));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut tensors = BTreeMap::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            if n != e.len || e.offset + e.len > values.len() {
                return Err(bad(format!("entry `{}` out of bounds", e.name)));
            }
            tensors.insert(e.name, (e.shape, values[e.offset..e.offset + e.len].to_vec()));
        }
        Ok(Checkpoint {
            step: manifest.step,
            config_hash: manifest.config_hash,
            config: manifest.config,
            meta: manifest.meta,
            tensors,
        })
    }
}

pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:06}"))
}

/// Checkpoint directories under `root`, ascending by step.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else { continue };
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.parse::<u64>().ok()) {
            if path.join(MANIFEST_FILE).exists() {
                out.push((step, path));
            }
        }
    }
    out.sort();
    Ok(out)
}
