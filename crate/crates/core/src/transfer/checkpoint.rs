use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MACNET1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mc,
    Seq2seq,
    Bundle,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mc => "mc",
            ModelKind::Seq2seq => "seq2seq",
            ModelKind::Bundle => "bundle",
        })
    }
}

/// Location of one tensor in the blob; `offset` is in bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    #[serde(default)]
    pub frozen: bool,
    #[serde(default)]
    pub pad_row: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ModelKind,
    pub entries: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

/// A parameter store tagged with its model kind and free-form metadata
/// (configs, vocabularies, seeds).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: ParamStore,
    pub metadata: Map<String, Value>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, params: ParamStore) -> Self {
        Checkpoint {
            kind,
            params,
            metadata: Map::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    /// Deserializes metadata entry `key`.
    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint metadata lacks {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Kind {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let entries = self
            .params
            .iter()
            .map(|(name, p)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    frozen: p.frozen,
                    pad_row: p.pad_row,
                };
                offset += 4 * p.value.len();
                e
            })
            .collect();
        Manifest {
            version: FORMAT_VERSION,
            kind: self.kind,
            entries,
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        let blob_len: usize = self.params.iter().map(|(_, p)| 4 * p.value.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a whole checkpoint; nothing is returned unless
    /// every entry is consistent with the blob.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Integrity("missing MACNET1 header".into()))?;
        if rest.len() < 8 {
            return Err(Error::Integrity("truncated manifest length".into()));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(Error::Integrity("truncated manifest".into()));
        }
        let (text, blob) = rest.split_at(len);
        let version = serde_json::from_slice::<Value>(text)?
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Integrity("manifest has no version".into()))? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_slice(text)?;

        let mut seen = HashSet::new();
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Integrity(format!("duplicate tensor name {}", e.name)));
            }
            let bytes = e
                .shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Integrity(format!("{}: shape overflows", e.name)))?;
            let end = e.offset.checked_add(bytes).filter(|&end| end <= blob.len());
            match end {
                Some(end) if e.offset % 4 == 0 => spans.push((e.offset, end, &e.name)),
                _ => {
                    return Err(Error::Integrity(format!(
                        "{}: {} bytes at offset {} exceed blob of {} bytes",
                        e.name,
                        bytes,
                        e.offset,
                        blob.len()
                    )))
                }
            }
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Integrity(format!("{} overlaps {}", w[1].2, w[0].2)));
            }
        }

        let mut params = ParamStore::new();
        for e in &manifest.entries {
            let n: usize = e.shape.iter().product();
            let data = blob[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let param = Param {
                value: Tensor::new(e.shape.clone(), data)?,
                frozen: e.frozen,
                pad_row: e.pad_row,
            };
            params.insert_param(e.name.clone(), param)?;
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            params,
            metadata: manifest.metadata,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<Manifest> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::file(path, e))?;
    Ok(ckpt.manifest())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
