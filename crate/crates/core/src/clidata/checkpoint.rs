//! Checkpoint files.
//!
//! Layout: `NTSC`, u32 version, u64 manifest length, a JSON manifest, then
//! one little-endian f32 blob per parameter in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::{read_exact_or, read_f32s};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NtsFormer};
use crate::numkit::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NTSC";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_MANIFEST: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Free-form metadata; model checkpoints store their config here.
    pub meta: serde_json::Value,
    pub params: Vec<BlobEntry>,
}

pub fn write_params<W: Write>(w: &mut W, meta: serde_json::Value, params: &ParamStore<f32>) -> std::io::Result<()> {
    let manifest = Manifest {
        meta,
        params: params
            .iter()
            .map(|p| BlobEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(std::io::Error::other)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in params.iter() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R, path: &Path) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let mut head = [0u8; 16];
    read_exact_or(r, &mut head, path)?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, format!("bad checkpoint magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap());
    if len > MAX_MANIFEST {
        return Err(Error::format(path, format!("manifest of {len} bytes")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact_or(r, &mut json, path)?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::format(path, format!("shape of `{}` overflows", entry.name)))?;
        let data = read_f32s(r, numel, path)?;
        let tensor = Tensor::new(entry.shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        store
            .insert(entry.name.clone(), tensor)
            .map_err(|e| Error::format(path, e.to_string()))?;
        store.get_mut(&entry.name).expect("just inserted").trainable = entry.trainable;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after last blob"));
    }
    Ok((manifest.meta, store))
}

pub fn save_params(path: &Path, meta: serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, meta, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut BufReader::new(file), path)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    config: ModelConfig,
}

const MODEL_FORMAT: &str = "ntsformer";

pub fn save_model(path: &Path, model: &NtsFormer) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        format: MODEL_FORMAT.into(),
        config: model.config.clone(),
    })
    .map_err(|e| Error::format(path, e.to_string()))?;
    save_params(path, meta, &model.params)
}

/// Loads a model and checks its parameters against the layout its config
/// implies.
pub fn load_model(path: &Path) -> Result<NtsFormer> {
    let (meta, params) = load_params(path)?;
    let meta: ModelMeta =
        serde_json::from_value(meta).map_err(|e| Error::format(path, format!("model metadata: {e}")))?;
    if meta.format != MODEL_FORMAT {
        return Err(Error::format(path, format!("not a model checkpoint: `{}`", meta.format)));
    }
    meta.config.validate()?;
    let reference = NtsFormer::new(meta.config.clone(), 0)?;
    let layout = |s: &ParamStore<f32>| {
        s.iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    if layout(&reference.params) != layout(&params) {
        return Err(Error::format(path, "parameters do not match the stored model config"));
    }
    Ok(NtsFormer {
        config: meta.config,
        params,
    })
}
