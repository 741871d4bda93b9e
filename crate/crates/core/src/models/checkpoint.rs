//! Versioned on-disk checkpoints: a directory holding `manifest.json` and a
//! little-endian `f64` blob `tensors.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelCfg, ParamFlags, ParamStore};
use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "stec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    Shadow,
    Momentum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// Offset in elements.
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flags: Option<ParamFlags>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    step: u64,
    epoch: u64,
    config_hash: String,
    model: ModelCfg,
    blob_sha256: String,
    entries: Vec<Entry>,
}

/// Model state plus the optimizer momentum needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub model: ModelCfg,
    pub store: ParamStore,
    pub momentum: BTreeMap<String, Tensor>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Checkpoint {
    /// Writes to `dir`, replacing any previous checkpoint only once the new
    /// one is complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, group: Group, t: &Tensor, flags: Option<ParamFlags>| {
            entries.push(Entry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                offset,
                flags,
            });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (n, t) in self.store.params() {
            push(n, Group::Param, t, Some(self.store.flags(n)));
        }
        for (n, t) in self.store.buffers() {
            push(n, Group::Buffer, t, None);
        }
        if let Some(shadow) = self.store.shadow() {
            for (n, t) in shadow {
                push(n, Group::Shadow, t, None);
            }
        }
        for (n, t) in &self.momentum {
            push(n, Group::Momentum, t, None);
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: "f64".into(),
            endianness: "little".into(),
            step: self.step,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            model: self.model.clone(),
            blob_sha256: sha256_hex(&blob),
            entries,
        };
        let staging = sibling(dir, "partial");
        if staging.exists() {
            fs::remove_dir_all(&staging).at(&staging)?;
        }
        fs::create_dir_all(&staging).at(&staging)?;
        fs::write(staging.join(BLOB), &blob).at(staging.join(BLOB))?;
        fs::write(staging.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?).at(staging.join(MANIFEST))?;
        if dir.exists() {
            let old = sibling(dir, "old");
            if old.exists() {
                fs::remove_dir_all(&old).at(&old)?;
            }
            fs::rename(dir, &old).at(dir)?;
            fs::rename(&staging, dir).at(dir)?;
            fs::remove_dir_all(&old).at(&old)?;
        } else {
            fs::rename(&staging, dir).at(dir)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath).at(&mpath)?).map_err(|e| Error::Format {
            what: mpath.display().to_string(),
            detail: e.to_string(),
        })?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: format!("unexpected format tag {:?}", manifest.format),
            });
        }
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint".into(),
                found: manifest.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if manifest.dtype != "f64" || manifest.endianness != "little" {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: format!("unsupported {} {}", manifest.endianness, manifest.dtype),
            });
        }
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath).at(&bpath)?;
        let found = sha256_hex(&blob);
        if found != manifest.blob_sha256 {
            return Err(Error::Checksum {
                what: bpath.display().to_string(),
                expected: manifest.blob_sha256,
                found,
            });
        }
        if blob.len() % 8 != 0 {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: "blob length is not a multiple of 8".into(),
            });
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut store = ParamStore::new();
        let mut shadow = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for e in manifest.entries {
            let len: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + len).ok_or_else(|| Error::Format {
                what: "checkpoint".into(),
                detail: format!("entry {} runs past the blob", e.name),
            })?;
            let t = Tensor::new(e.shape, data.to_vec())?;
            match e.group {
                Group::Param => {
                    store.insert(&e.name, t, e.flags.unwrap_or_default());
                }
                Group::Buffer => store.set_buffer(&e.name, t),
                Group::Shadow => {
                    shadow.insert(e.name, t);
                }
                Group::Momentum => {
                    momentum.insert(e.name, t);
                }
            }
        }
        if !shadow.is_empty() {
            store.set_shadow(Some(shadow));
        }
        Ok(Self {
            step: manifest.step,
            epoch: manifest.epoch,
            config_hash: manifest.config_hash,
            model: manifest.model,
            store,
            momentum,
        })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = ModelCfg {
            proj_hidden: 8,
            manip_hidden: 8,
            ..ModelCfg::default()
        };
        let mut store = ParamStore::init(&model, 3).unwrap();
        store.enable_shadow();
        let mut momentum = BTreeMap::new();
        momentum.insert("f.out.w".to_string(), Tensor::full(store.get("f.out.w").unwrap().shape(), 0.25));
        Checkpoint {
            step: 17,
            epoch: 2,
            config_hash: "abc".into(),
            model,
            store,
            momentum,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let c = sample();
        c.save(&path).unwrap();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        sample().save(&path).unwrap();
        let mut blob = fs::read(path.join(BLOB)).unwrap();
        blob[3] ^= 1;
        fs::write(path.join(BLOB), &blob).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checksum { .. })));

        sample().save(&path).unwrap();
        let text = fs::read_to_string(path.join(MANIFEST)).unwrap();
        fs::write(path.join(MANIFEST), text.replace("\"version\": 1", "\"version\": 9")).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Version { found: 9, .. })));
    }
}
