//! Model checkpoints and weight files on top of the [`Archive`] container.
//!
//! Parameters are stored under their store names
//! (`vit.block.7.attn.q_proj.weight`, `head.gru.fwd.w_r`, ...). Optimizer
//! moments, when present, sit beside them as `optim.m.<name>` and
//! `optim.v.<name>`. The manifest metadata carries a `checkpoint` object with
//! the model config, its hash, and training progress.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::train::{Moments, OptimizerState};

const META_KEY: &str = "checkpoint";

/// Training progress recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_test_top1: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    model_config: ModelConfig,
    dtype: String,
    optimizer_step: Option<u64>,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub struct Restored<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub meta: CheckpointMeta,
}

/// Writes every parameter of `store` whose name starts with `prefix`.
pub fn weights_archive<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Archive> {
    let mut archive = Archive::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        archive.push(p.name.clone(), &p.tensor)?;
    }
    Ok(archive)
}

/// Overwrites every parameter of `store` whose name starts with `prefix`
/// from `archive`. Stored precision may differ from `T`. Returns the number
/// of tensors loaded. Nothing is modified unless every key is present with
/// the right shape.
pub fn load_weights<T: Scalar>(archive: &Archive, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
    let mut staged = Vec::new();
    for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        let entry = archive
            .entry(&p.name)
            .ok_or_else(|| Error::Load(format!("missing key {}", p.name)))?;
        if entry.shape != p.tensor.shape() {
            return Err(Error::Load(format!(
                "{}: shape mismatch, model expects {:?}, archive has {:?}",
                p.name,
                p.tensor.shape(),
                entry.shape
            )));
        }
        staged.push((id, archive.tensor::<T>(&p.name)?));
    }
    let n = staged.len();
    for (id, t) in staged {
        store.assign(id, t)?;
    }
    Ok(n)
}

pub fn checkpoint_archive<T: Scalar>(
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    meta: &CheckpointMeta,
) -> Result<Archive> {
    let mut archive = weights_archive(&model.store, "")?;
    if let Some(opt) = optimizer {
        if opt.moments.len() != model.store.len() {
            return Err(Error::State("optimizer does not match the model".into()));
        }
        for (id, p) in model.store.iter() {
            if let Some(m) = &opt.moments[id.index()] {
                let shape = p.tensor.shape();
                archive.push(format!("optim.m.{}", p.name), &crate::tensor::Tensor::new(shape, m.m.clone())?)?;
                archive.push(format!("optim.v.{}", p.name), &crate::tensor::Tensor::new(shape, m.v.clone())?)?;
            }
        }
    }
    let header = Header {
        config_hash: model.config.hash(),
        model_config: model.config.clone(),
        dtype: T::DTYPE.to_string(),
        optimizer_step: optimizer.map(|o| o.step),
        meta: meta.clone(),
    };
    archive
        .metadata
        .insert(META_KEY.into(), serde_json::to_value(header).expect("header serializes"));
    Ok(archive)
}

/// Rebuilds a model (and optimizer, if stored) from a checkpoint archive.
/// With `expected` set, the stored architecture must hash identically.
pub fn restore<T: Scalar>(archive: &Archive, expected: Option<&ModelConfig>) -> Result<Restored<T>> {
    let header: Header = archive
        .metadata
        .get(META_KEY)
        .cloned()
        .ok_or_else(|| Error::Format("archive carries no checkpoint header".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(format!("checkpoint header: {e}"))))?;
    if header.model_config.hash() != header.config_hash {
        return Err(Error::Format("checkpoint config hash does not match its own config".into()));
    }
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != header.config_hash {
            return Err(Error::Load(format!(
                "config hash mismatch: checkpoint {}, requested {}",
                header.config_hash, want
            )));
        }
    }
    let mut model = Model::<T>::new(header.model_config, header.meta.seed)?;
    load_weights(archive, &mut model.store, "")?;

    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut moments = Vec::with_capacity(model.store.len());
            for (_, p) in model.store.iter() {
                if !p.tensor.requires_grad {
                    moments.push(None);
                    continue;
                }
                let read = |kind: &str| -> Result<Vec<T>> {
                    let key = format!("optim.{kind}.{}", p.name);
                    let t = archive.tensor::<T>(&key)?;
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::Load(format!(
                            "{key}: shape mismatch, model expects {:?}, archive has {:?}",
                            p.tensor.shape(),
                            t.shape()
                        )));
                    }
                    Ok(t.into_data())
                };
                moments.push(Some(Moments { m: read("m")?, v: read("v")? }));
            }
            Some(OptimizerState { step, moments })
        }
    };
    Ok(Restored {
        model,
        optimizer,
        meta: header.meta,
    })
}

pub fn checkpoint_save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    checkpoint_archive(model, optimizer, meta)?.write(path)
}

pub fn checkpoint_load<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Restored<T>> {
    restore(&Archive::read(path)?, expected)
}
