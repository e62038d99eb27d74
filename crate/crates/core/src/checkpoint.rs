//! Model checkpoints: a magic line, a JSON manifest, then little-endian f32
//! blobs for every parameter and batchnorm statistic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CAMFORG1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub tensors: Vec<Entry>,
}

fn tensors(model: &Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<_> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    for (name, stats) in model.running_stats() {
        out.push((format!("{name}.running_mean"), vec![stats.mean.len()], stats.mean.clone()));
        out.push((format!("{name}.running_var"), vec![stats.var.len()], stats.var.clone()));
    }
    out
}

pub fn to_bytes(model: &Model, seed: u64, epoch: usize, val_accuracy: f64) -> Vec<u8> {
    let items = tensors(model);
    let mut entries = Vec::with_capacity(items.len());
    let mut blob = Vec::new();
    for (name, shape, data) in items {
        entries.push(Entry {
            name,
            shape,
            offset: blob.len(),
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        spec: model.spec().clone(),
        seed,
        epoch,
        val_accuracy,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Rebuild a model from checkpoint bytes, checking every name, shape, and length.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let corrupt = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let blob = &bytes[16 + len..];

    let mut model = Model::build(manifest.spec.clone(), manifest.seed)?;
    let expected = tensors(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(expected.len());
    let mut total = 0;
    for ((name, shape, _), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match model tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = blob
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| corrupt(format!("tensor {name} runs past end of file")))?;
        values.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect::<Vec<_>>());
        total += 4 * n;
    }
    if total != blob.len() {
        return Err(corrupt(format!("{} blob bytes, {total} described", blob.len())));
    }
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite weight".into()));
    }

    let n_params = model.params().len();
    let mut values = values.into_iter();
    for id in 0..n_params {
        let shape = model.params().get(id).value.shape().to_vec();
        model.params_mut().set_value(id, Tensor::new(shape, values.next().unwrap())?)?;
    }
    for stats in model.running_stats_mut() {
        stats.mean = values.next().unwrap();
        stats.var = values.next().unwrap();
    }
    Ok((model, manifest))
}

pub fn save(path: &Path, model: &Model, seed: u64, epoch: usize, val_accuracy: f64) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model, seed, epoch, val_accuracy)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
