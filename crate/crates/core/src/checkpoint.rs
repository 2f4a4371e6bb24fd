//! Checkpoint directory: `manifest.json` (tensor name, shape, byte offset),
//! `weights.bin` (little-endian f32) and `config.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Tensor;
use crate::weights::{param_shapes, Weights};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    model.weights().for_each(|info, t| {
        tensors.push(TensorEntry { name: info.name.to_string(), shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest { version: FORMAT_VERSION, total_bytes: blob.len(), tensors };
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(model.config())?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model> {
    let read = |f: &str| fs::read(dir.join(f)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(f).display())));
    let config: ModelConfig = serde_json::from_slice(&read(CONFIG_FILE)?)?;
    config.validate()?;
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.version)));
    }
    let blob = read(WEIGHTS_FILE)?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::Checkpoint(format!("weights.bin has {} bytes, manifest says {}", blob.len(), manifest.total_bytes)));
    }
    let mut entries = manifest.tensors.iter();
    let mut err = None;
    let weights: Weights<Tensor> = param_shapes(&config).map(|info, shape| {
        let fail = |msg: String| (Error::Checkpoint(msg), Tensor::zeros(shape));
        let r = match entries.next() {
            None => Err(fail(format!("manifest is missing {}", info.name))),
            Some(e) if e.name != info.name || &e.shape != shape => {
                Err(fail(format!("expected {} {:?}, manifest has {} {:?}", info.name, shape, e.name, e.shape)))
            }
            Some(e) => {
                let n: usize = shape.iter().product();
                match blob.get(e.offset..e.offset + 4 * n) {
                    None => Err(fail(format!("{} lies outside weights.bin", e.name))),
                    Some(bytes) => {
                        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                        Ok(Tensor::new(shape.clone(), data).expect("length checked"))
                    }
                }
            }
        };
        r.unwrap_or_else(|(e, t)| {
            err.get_or_insert(e);
            t
        })
    });
    if let Some(e) = err {
        return Err(e);
    }
    if entries.next().is_some() {
        return Err(Error::Checkpoint("manifest lists extra tensors".into()));
    }
    Model::new(config, weights)
}
