//! On-disk training state: `manifest.json` plus one little-endian blob per tensor.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Module;
use crate::tensor::{Precision, Real, Tensor};
use crate::train::{SamplerState, TrainState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "oltr-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Precision,
    /// Blob path relative to the checkpoint directory.
    pub file: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub dtype: Precision,
    pub epoch: usize,
    pub step: u64,
    pub memory_ready: bool,
    pub num_classes: usize,
    pub sample_shape: Vec<usize>,
    pub rng: ChaCha8Rng,
    pub sampler: SamplerState,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint {
                tensor: MANIFEST_FILE.into(),
                reason: format!("unsupported format {:?}", m.format),
            });
        }
        Ok(m)
    }
}

fn named_tensors<T: Real>(state: &TrainState<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = state.model.named_params();
    let velocity: Vec<(String, &Tensor<T>)> = out
        .iter()
        .zip(&state.velocity)
        .map(|((name, _), v)| (format!("velocity.{name}"), v))
        .collect();
    out.push(("memory.centroids".into(), state.model.bank.centroids()));
    out.extend(velocity);
    out
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(state) {
        let mut buf = Vec::with_capacity(t.len() * T::DTYPE.bytes());
        for &x in t.data() {
            x.to_le(&mut buf);
        }
        let file = format!("{name}.bin");
        fs::write(dir.join(&file), &buf)?;
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            file,
            bytes: buf.len(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config_hash: config.hash(),
        config: config.clone(),
        dtype: T::DTYPE,
        epoch: state.epoch,
        step: state.step,
        memory_ready: state.memory_ready,
        num_classes: state.model.num_classes(),
        sample_shape: state.model.backbone.sample_shape().to_vec(),
        rng: state.rng.clone(),
        sampler: state.sampler.clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// A restored state and the manifest it came from.
#[derive(Debug)]
pub struct Loaded<T> {
    pub state: TrainState<T>,
    pub manifest: Manifest,
    /// False when `expected` was given and its hash differs from the manifest's.
    pub hash_matches: bool,
}

fn read_blob<T: Real>(dir: &Path, entry: &TensorEntry) -> Result<Tensor<T>> {
    let fail = |reason: String| Error::Checkpoint {
        tensor: entry.name.clone(),
        reason,
    };
    if entry.dtype != T::DTYPE {
        return Err(fail(format!(
            "stored as {}, requested {}",
            entry.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let len: usize = entry.shape.iter().product();
    let width = T::DTYPE.bytes();
    if entry.bytes != len * width {
        return Err(fail(format!(
            "manifest lists {} bytes for shape {:?}",
            entry.bytes, entry.shape
        )));
    }
    let raw = fs::read(dir.join(&entry.file)).map_err(|e| fail(format!("{}: {e}", entry.file)))?;
    if raw.len() != entry.bytes {
        return Err(fail(format!(
            "blob has {} bytes, manifest says {}",
            raw.len(),
            entry.bytes
        )));
    }
    let data = raw.chunks_exact(width).map(T::from_le).collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| fail(e.to_string()))
}

/// Restores a state saved by [`save_checkpoint`]. A config hash that differs from
/// `expected` only logs a warning.
pub fn load_checkpoint<T: Real>(dir: &Path, expected: Option<&ExperimentConfig>) -> Result<Loaded<T>> {
    let manifest = Manifest::read(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint {
            tensor: MANIFEST_FILE.into(),
            reason: format!("stored as {}, requested {}", manifest.dtype.name(), T::DTYPE.name()),
        });
    }
    let hash_matches = match expected {
        Some(cfg) if cfg.hash() != manifest.config_hash => {
            log::warn!(
                "checkpoint {} was written with config {} but the current config hashes to {}",
                dir.display(),
                manifest.config_hash,
                cfg.hash()
            );
            false
        }
        _ => true,
    };
    // Parameter values are all overwritten below; the init RNG only fixes shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<T>::init(
        &mut rng,
        &manifest.config.model,
        &manifest.sample_shape,
        manifest.num_classes,
    )?;
    let param_names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut velocity: Vec<Option<Tensor<T>>> = vec![None; param_names.len()];
    let mut seen = std::collections::BTreeSet::new();
    for entry in &manifest.tensors {
        let t = read_blob::<T>(dir, entry)?;
        if !seen.insert(entry.name.clone()) {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                reason: "listed twice".into(),
            });
        }
        match entry.name.strip_prefix("velocity.") {
            Some(param) => {
                let slot = param_names
                    .iter()
                    .position(|n| n == param)
                    .ok_or_else(|| Error::Checkpoint {
                        tensor: entry.name.clone(),
                        reason: "no such parameter".into(),
                    })?;
                velocity[slot] = Some(t);
            }
            None => model.set_named(&entry.name, t)?,
        }
    }
    for name in param_names
        .iter()
        .chain(std::iter::once(&"memory.centroids".to_string()))
    {
        if !seen.contains(name) {
            return Err(Error::Checkpoint {
                tensor: name.clone(),
                reason: "missing from manifest".into(),
            });
        }
    }
    let velocity = velocity
        .into_iter()
        .zip(&param_names)
        .map(|(v, name)| {
            v.ok_or_else(|| Error::Checkpoint {
                tensor: format!("velocity.{name}"),
                reason: "missing from manifest".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for (v, (name, p)) in velocity.iter().zip(model.named_params()) {
        if v.shape() != p.shape() {
            return Err(Error::Checkpoint {
                tensor: format!("velocity.{name}"),
                reason: format!("shape {:?} != {:?}", v.shape(), p.shape()),
            });
        }
    }
    let state = TrainState {
        model,
        velocity,
        epoch: manifest.epoch,
        step: manifest.step,
        memory_ready: manifest.memory_ready,
        rng: manifest.rng.clone(),
        sampler: manifest.sampler.clone(),
    };
    Ok(Loaded {
        state,
        manifest,
        hash_matches,
    })
}
