//! Checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! The blob starts with the magic `DPV1` followed by every tensor's
//! little-endian scalars in manifest order. Each manifest entry records the
//! tensor's byte offset into the blob. Optimizer moments, when present, are
//! stored as extra tensors named `optim.m/<param>` and `optim.v/<param>`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::{AdamW, TrainConfig};

pub const MAGIC: &[u8; 4] = b"DPV1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    /// Completed optimizer steps.
    pub step: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainManifest>,
    pub tensors: Vec<TensorEntry>,
}

/// Training state saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S: Scalar> {
    pub config: TrainConfig,
    pub optim: AdamW<S>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar> {
    pub model: Model<S>,
    pub train: Option<TrainState<S>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint into `dir`, creating it if needed.
pub fn save<S: Scalar>(dir: &Path, model: &Model<S>, train: Option<(&TrainConfig, &AdamW<S>)>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = MAGIC.to_vec();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor<S>, blob: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: S::DTYPE.to_string(),
            offset: blob.len() as u64,
        });
        for &x in t.data() {
            x.write_le(blob);
        }
    };
    for (name, p) in model.params.iter() {
        push(name.to_string(), &p.value, &mut blob);
    }
    if let Some((_, opt)) = train {
        for (name, t) in &opt.m {
            push(format!("{M_PREFIX}{name}"), t, &mut blob);
        }
        for (name, t) in &opt.v {
            push(format!("{V_PREFIX}{name}"), t, &mut blob);
        }
    }
    let manifest = Manifest {
        format: "DPV1".into(),
        dtype: S::DTYPE.into(),
        model: model.config.clone(),
        train: train.map(|(c, o)| TrainManifest { step: o.step, config: c.clone() }),
        tensors: entries,
    };
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != "DPV1" {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", m.format)));
    }
    Ok(m)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::BYTES).map(T::read_le).collect()
}

fn read_tensor<S: Scalar>(blob: &[u8], e: &TensorEntry) -> Result<Tensor<S>> {
    let n: usize = e.shape.iter().product();
    let width = match e.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("tensor {} has unknown dtype {other}", e.name))),
    };
    let start = e.offset as usize;
    let end = start + n * width;
    if start < MAGIC.len() || end > blob.len() {
        return Err(Error::Format(format!("tensor {} lies outside the blob", e.name)));
    }
    let bytes = &blob[start..end];
    let data: Vec<S> = match width {
        4 => decode::<f32>(bytes).into_iter().map(|x| S::of(x as f64)).collect(),
        _ => decode::<f64>(bytes).into_iter().map(S::of).collect(),
    };
    Tensor::new(e.shape.clone(), data)
}

/// Loads a checkpoint, converting the stored scalars to `S` if needed.
pub fn load<S: Scalar>(dir: &Path) -> Result<Checkpoint<S>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.len() < MAGIC.len() || &blob[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!("{} does not start with DPV1", path.display())));
    }
    let mut params = ParameterStore::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for e in &manifest.tensors {
        let t = read_tensor::<S>(&blob, e)?;
        if let Some(name) = e.name.strip_prefix(M_PREFIX) {
            m.insert(name.to_string(), t);
        } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
            v.insert(name.to_string(), t);
        } else {
            params.insert(e.name.clone(), t);
        }
    }
    let model = Model::from_params(manifest.model.clone(), params)?;
    let train = match manifest.train {
        Some(tm) => {
            for name in model.params.names() {
                if !m.contains_key(name) || !v.contains_key(name) {
                    return Err(Error::Format(format!("missing optimizer moments for {name}")));
                }
            }
            Some(TrainState { config: tm.config, optim: AdamW { step: tm.step, m, v } })
        }
        None => None,
    };
    Ok(Checkpoint { model, train })
}
