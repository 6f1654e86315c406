//! FCFD-CKPT-1 checkpoint container: an ASCII magic tag, a length-prefixed
//! JSON manifest, then raw little-endian float32 blobs in manifest order.
//!
//! Entry namespaces:
//!   params/<name>                             model parameters
//!   bridges/<name>                            bridge parameters
//!   normstats/<layer>/<pathkey>/{mean,var}    model running statistics
//!   bridges/normstats/<layer>/<pathkey>/...   bridge running statistics

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bridges::BridgeSet;
use crate::error::{FcfdError, Result};
use crate::graph::Scalar;
use crate::params::ParamStore;
use crate::pathing::{NormStore, PathKey, StatsEntry};
use crate::staged::StagedModel;

pub const MAGIC: &[u8; 11] = b"FCFD-CKPT-1";

#[derive(Serialize, Deserialize, Debug)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Statistics entries carry their EMA update count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<u64>,
}

#[derive(Serialize, Deserialize, Debug)]
struct Manifest {
    format: String,
    model_id: String,
    num_stages: usize,
    num_classes: usize,
    input_shape: (usize, usize, usize),
    stage_output_shapes: Vec<(usize, usize, usize)>,
    entries: Vec<ManifestEntry>,
}

fn push_params<F: Scalar>(
    prefix: &str,
    params: &ParamStore<F>,
    entries: &mut Vec<ManifestEntry>,
    blobs: &mut Vec<Vec<f32>>,
) {
    for e in params.entries() {
        entries.push(ManifestEntry {
            name: format!("{prefix}/{}", e.name),
            shape: e.value.shape().to_vec(),
            count: None,
        });
        blobs.push(e.value.iter().map(|v| v.to_f32().unwrap()).collect());
    }
}

fn push_normstats<F: Scalar>(
    prefix: &str,
    norms: &NormStore<F>,
    entries: &mut Vec<ManifestEntry>,
    blobs: &mut Vec<Vec<f32>>,
) {
    for state in norms.states() {
        for (key, stats) in &state.stats {
            let base = format!("{prefix}/{}/{}", state.name, key.as_string());
            entries.push(ManifestEntry {
                name: format!("{base}/mean"),
                shape: vec![state.channels],
                count: Some(stats.update_count),
            });
            blobs.push(stats.running_mean.iter().map(|v| v.to_f32().unwrap()).collect());
            entries.push(ManifestEntry {
                name: format!("{base}/var"),
                shape: vec![state.channels],
                count: Some(stats.update_count),
            });
            blobs.push(stats.running_var.iter().map(|v| v.to_f32().unwrap()).collect());
        }
    }
}

/// Serializes a model (and optionally its bridges) to `path`.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &StagedModel<F>,
    bridges: Option<&BridgeSet<F>>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<Vec<f32>> = Vec::new();
    push_params("params", &model.params, &mut entries, &mut blobs);
    push_normstats("normstats", &model.norms, &mut entries, &mut blobs);
    if let Some(b) = bridges {
        push_params("bridges", &b.params, &mut entries, &mut blobs);
        push_normstats("bridges/normstats", &b.norms, &mut entries, &mut blobs);
    }
    let manifest = Manifest {
        format: "FCFD-CKPT-1".to_string(),
        model_id: model.id.clone(),
        num_stages: model.num_stages(),
        num_classes: model.num_classes,
        input_shape: model.input_shape,
        stage_output_shapes: model.stage_output_shapes.clone(),
        entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| FcfdError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(manifest_bytes.len() as u64)?;
    w.write_all(&manifest_bytes)?;
    for blob in &blobs {
        for &v in blob {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct LoadedCheckpoint {
    manifest: Manifest,
    blobs: Vec<Vec<f32>>,
}

fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 11];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FcfdError::Checkpoint(format!(
            "bad magic: expected FCFD-CKPT-1, got {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mlen = r.read_u64::<LittleEndian>()? as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)?;
    let manifest: Manifest =
        serde_json::from_slice(&mbytes).map_err(|e| FcfdError::Checkpoint(e.to_string()))?;
    let mut blobs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let mut blob = Vec::with_capacity(n);
        for _ in 0..n {
            blob.push(r.read_f32::<LittleEndian>().map_err(|err| {
                FcfdError::Checkpoint(format!("truncated blob for '{}': {err}", e.name))
            })?);
        }
        blobs.push(blob);
    }
    Ok(LoadedCheckpoint { manifest, blobs })
}

fn load_params<F: Scalar>(
    prefix: &str,
    params: &mut ParamStore<F>,
    ckpt: &LoadedCheckpoint,
) -> Result<()> {
    for e in params.entries_mut() {
        let full = format!("{prefix}/{}", e.name);
        let idx = ckpt
            .manifest
            .entries
            .iter()
            .position(|m| m.name == full)
            .ok_or_else(|| FcfdError::Checkpoint(format!("missing entry '{full}'")))?;
        let m = &ckpt.manifest.entries[idx];
        if m.shape != e.value.shape() {
            return Err(FcfdError::Checkpoint(format!(
                "shape mismatch for '{full}': checkpoint {:?}, model {:?}",
                m.shape,
                e.value.shape()
            )));
        }
        for (dst, &src) in e.value.iter_mut().zip(&ckpt.blobs[idx]) {
            *dst = F::f(src as f64);
        }
    }
    Ok(())
}

fn load_normstats<F: Scalar>(
    prefix: &str,
    norms: &mut NormStore<F>,
    ckpt: &LoadedCheckpoint,
) -> Result<()> {
    for state in norms.states_mut() {
        state.stats.clear();
    }
    let want = format!("{prefix}/");
    for (idx, m) in ckpt.manifest.entries.iter().enumerate() {
        let Some(rest) = m.name.strip_prefix(&want) else {
            continue;
        };
        // Model stats live under "normstats/", bridge stats under
        // "bridges/normstats/"; skip the bridge namespace when loading
        // model stats.
        if prefix == "normstats" && m.name.starts_with("bridges/") {
            continue;
        }
        let Some((base, field)) = rest.rsplit_once('/') else {
            continue;
        };
        if field != "mean" && field != "var" {
            continue;
        }
        let Some((layer, keystr)) = base.split_once('/') else {
            continue;
        };
        let Some(state) = norms
            .states_mut()
            .iter_mut()
            .find(|s| s.name == layer)
        else {
            return Err(FcfdError::Checkpoint(format!(
                "statistics for unknown layer '{layer}'"
            )));
        };
        let key = PathKey::parse(keystr);
        let entry = state.stats.entry(key).or_insert_with(|| StatsEntry {
            running_mean: ndarray::Array1::zeros(state.channels),
            running_var: ndarray::Array1::ones(state.channels),
            update_count: 0,
        });
        let arr = ndarray::Array1::from_iter(ckpt.blobs[idx].iter().map(|&v| F::f(v as f64)));
        if arr.len() != state.channels {
            return Err(FcfdError::Checkpoint(format!(
                "statistics length mismatch for '{}'",
                m.name
            )));
        }
        if field == "mean" {
            entry.running_mean = arr;
        } else {
            entry.running_var = arr;
        }
        if let Some(c) = m.count {
            entry.update_count = c;
        }
    }
    Ok(())
}

/// Loads parameters and running statistics into an already constructed model
/// of the same architecture.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    model: &mut StagedModel<F>,
    bridges: Option<&mut BridgeSet<F>>,
) -> Result<()> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.manifest.model_id != model.id {
        return Err(FcfdError::Checkpoint(format!(
            "checkpoint is for model '{}', expected '{}'",
            ckpt.manifest.model_id, model.id
        )));
    }
    if ckpt.manifest.num_stages != model.num_stages() {
        return Err(FcfdError::Checkpoint(format!(
            "checkpoint has {} stages, model has {}",
            ckpt.manifest.num_stages,
            model.num_stages()
        )));
    }
    load_params("params", &mut model.params, &ckpt)?;
    load_normstats("normstats", &mut model.norms, &ckpt)?;
    if let Some(b) = bridges {
        load_params("bridges", &mut b.params, &ckpt)?;
        load_normstats("bridges/normstats", &mut b.norms, &ckpt)?;
    }
    Ok(())
}

/// Reads just the model id of a checkpoint.
pub fn checkpoint_model_id(path: &Path) -> Result<String> {
    Ok(read_checkpoint(path)?.manifest.model_id)
}
