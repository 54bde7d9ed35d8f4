//! Checkpoint files: a JSON manifest plus one raw little-endian blob.
//!
//! `model.json` lists every tensor with its name, shape, dtype and byte
//! range inside `model.bin`; optimizer moments are stored in the same blob
//! as `f64`. Values are copied byte for byte, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamSlot, AdamState, ParamStore};
use crate::error::{Error, Result};
use crate::numcore::{Dtype, Scalar};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Pairs of `<param>.adam_m` / `<param>.adam_v` entries.
    pub moments: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_sha256: String,
    pub model: serde_json::Value,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// How a checkpoint's parameter set must relate to the receiving store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Same names in both.
    Exact,
    /// Every checkpoint tensor must exist in the store; extra store
    /// parameters keep their values.
    CheckpointSubset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    blob: Vec<u8>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(blob)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    /// Snapshot of a store's parameters, optional optimizer state, the
    /// model description and free-form metadata.
    pub fn capture<T: Scalar, S: ParamStore<T> + ?Sized>(
        store: &S,
        model: serde_json::Value,
        optimizer: Option<&AdamState>,
        metadata: serde_json::Value,
    ) -> Self {
        let mut blob = Vec::new();
        let mut params = Vec::new();
        for p in store.params() {
            let offset = blob.len() as u64;
            for &v in p.value.data() {
                v.write_le(&mut blob);
            }
            params.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: T::DTYPE,
                offset,
                nbytes: blob.len() as u64 - offset,
                trainable: p.trainable,
            });
        }
        let optimizer = optimizer.map(|opt| {
            let mut moments = Vec::new();
            for slot in &opt.slots {
                for (suffix, data) in [("adam_m", &slot.m), ("adam_v", &slot.v)] {
                    let offset = blob.len() as u64;
                    for &v in data {
                        v.write_le(&mut blob);
                    }
                    moments.push(TensorEntry {
                        name: format!("{}.{suffix}", slot.name),
                        shape: vec![data.len()],
                        dtype: Dtype::F64,
                        offset,
                        nbytes: blob.len() as u64 - offset,
                        trainable: false,
                    });
                }
            }
            OptimizerEntry {
                lr: opt.lr,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                step: opt.step,
                moments,
            }
        });
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            blob: String::new(),
            blob_sha256: hex(&Sha256::digest(&blob)),
            model,
            params,
            optimizer,
            metadata,
        };
        Self { manifest, blob }
    }

    /// Writes `path` (manifest) and a sibling `.bin` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let blob_name = path
            .with_extension("bin")
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
            .to_string();
        let mut manifest = self.manifest.clone();
        manifest.blob = blob_name.clone();
        write_atomic(&blob_path(path, &blob_name), &self.blob)?;
        write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: malformed manifest: {e}", path.display())))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                path.display(),
                manifest.format_version
            )));
        }
        let bp = blob_path(path, &manifest.blob);
        let blob = fs::read(&bp).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", bp.display())))?;
        if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(Error::Checkpoint(format!("{}: blob checksum mismatch", bp.display())));
        }
        let all = manifest
            .params
            .iter()
            .chain(manifest.optimizer.iter().flat_map(|o| o.moments.iter()));
        for e in all {
            let count: usize = e.shape.iter().product();
            if e.nbytes != (count * e.dtype.size()) as u64 || e.offset + e.nbytes > blob.len() as u64 {
                return Err(Error::Checkpoint(format!("entry `{}` has an inconsistent byte range", e.name)));
            }
        }
        Ok(Self { manifest, blob })
    }

    fn values<T: Scalar>(&self, e: &TensorEntry) -> Vec<T> {
        let bytes = &self.blob[e.offset as usize..(e.offset + e.nbytes) as usize];
        match e.dtype {
            Dtype::F32 => bytes.chunks_exact(4).map(|c| T::of_f64(f32::read_le(c) as f64)).collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|c| T::of_f64(f64::read_le(c))).collect(),
        }
    }

    /// Copies stored values into a store. Stored and receiving precision
    /// may differ; same-precision restores are bit-exact.
    pub fn restore_params<T: Scalar, S: ParamStore<T> + ?Sized>(&self, store: &mut S, coverage: Coverage) -> Result<()> {
        let mut missing = Vec::new();
        for e in &self.manifest.params {
            if !store.params().iter().any(|p| p.name == e.name) {
                missing.push(e.name.clone());
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensors not present in the model: {}",
                missing.join(", ")
            )));
        }
        if coverage == Coverage::Exact {
            let extra: Vec<String> = store
                .params()
                .iter()
                .filter(|p| !self.manifest.params.iter().any(|e| e.name == p.name))
                .map(|p| p.name.clone())
                .collect();
            if !extra.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "model parameters missing from the checkpoint: {}",
                    extra.join(", ")
                )));
            }
        }
        for p in store.params_mut() {
            if let Some(e) = self.manifest.params.iter().find(|e| e.name == p.name) {
                if e.shape != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{}`: checkpoint shape {:?}, model shape {:?}",
                        e.name,
                        e.shape,
                        p.value.shape()
                    )));
                }
                let vals = self.values::<T>(e);
                p.value.data_mut().copy_from_slice(&vals);
                p.value.ensure_finite(&e.name)?;
                p.zero_grad();
            }
        }
        Ok(())
    }

    pub fn optimizer_state(&self) -> Option<AdamState> {
        let o = self.manifest.optimizer.as_ref()?;
        let slots = o
            .moments
            .chunks(2)
            .map(|pair| AdamSlot {
                name: pair[0].name.trim_end_matches(".adam_m").to_string(),
                m: self.values::<f64>(&pair[0]),
                v: self.values::<f64>(&pair[1]),
            })
            .collect();
        Some(AdamState {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            slots,
        })
    }

    pub fn model<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.manifest.model.clone())
            .map_err(|e| Error::Checkpoint(format!("model description does not parse: {e}")))
    }

    /// Raw parameter bytes, for byte-level comparisons.
    pub fn param_bytes(&self, name: &str) -> Option<&[u8]> {
        let e = self.manifest.params.iter().find(|e| e.name == name)?;
        Some(&self.blob[e.offset as usize..(e.offset + e.nbytes) as usize])
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }
}
