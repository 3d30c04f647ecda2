//! Pools of prefix experts: one trainable prefix per slot cluster.

use crate::backbone::{init_prefix_expert, BackboneConfig, PrefixExpert};
use crate::ckpt;
use crate::error::{Error, Result};
use crate::routing::{ClusterModel, FeatureMode};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where the pool came from: enough to reproduce routing decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolProvenance {
    pub k: usize,
    pub seed: u64,
    pub mode: FeatureMode,
}

#[derive(Debug)]
pub struct ExpertPool {
    pub config: BackboneConfig,
    pub experts: Vec<PrefixExpert>,
    pub provenance: PoolProvenance,
    /// per-expert training loss curves, when the pool was trained
    pub losses: Vec<Vec<f32>>,
}

/// One freshly initialized expert per cluster.
pub fn init_pool(config: &BackboneConfig, clusters: &ClusterModel, seed: u64) -> ExpertPool {
    let experts = (0..clusters.k)
        .map(|i| init_prefix_expert(config, i, seed))
        .collect();
    ExpertPool {
        config: config.clone(),
        experts,
        provenance: PoolProvenance {
            k: clusters.k,
            seed,
            mode: clusters.mode,
        },
        losses: Vec::new(),
    }
}

impl ExpertPool {
    pub fn expert(&self, index: usize) -> Result<&PrefixExpert> {
        self.experts
            .get(index)
            .ok_or_else(|| Error::contract(format!("expert index {index} out of {}", self.experts.len())))
    }
}

pub fn save_pool(pool: &ExpertPool, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    for (k, expert) in pool.experts.iter().enumerate() {
        for (name, tensor) in expert.named_params() {
            params.push((format!("expert{k}.{name}"), tensor));
        }
    }
    let meta = serde_json::json!({
        "config": pool.config,
        "provenance": pool.provenance,
        "experts": pool.experts.len(),
        "losses": pool.losses,
    });
    ckpt::save(path, "expert-pool", meta, &params)
}

pub fn load_pool(path: &Path) -> Result<ExpertPool> {
    let (manifest, params) = ckpt::load(path, "expert-pool")?;
    let config: BackboneConfig = serde_json::from_value(manifest.meta["config"].clone())
        .map_err(|e| Error::format(format!("pool config: {e}")))?;
    let provenance: PoolProvenance = serde_json::from_value(manifest.meta["provenance"].clone())
        .map_err(|e| Error::format(format!("pool provenance: {e}")))?;
    let n: usize = serde_json::from_value(manifest.meta["experts"].clone())
        .map_err(|e| Error::format(format!("pool size: {e}")))?;
    let mut experts: Vec<PrefixExpert> = (0..n).map(|i| PrefixExpert::zeros(&config, i)).collect();
    let expected = n * 2 * config.n_layers;
    if params.len() != expected {
        return Err(Error::format(format!(
            "expert pool holds {} tensors, expected {expected}",
            params.len()
        )));
    }
    for (name, tensor) in params {
        let (head, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::format(format!("bad pool param name {name:?}")))?;
        let k: usize = head
            .strip_prefix("expert")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad pool param name {name:?}")))?;
        let slot = experts
            .get_mut(k)
            .and_then(|e| e.param_mut(rest))
            .ok_or_else(|| Error::format(format!("unknown pool param {name:?}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::format(format!(
                "pool param {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    let losses = serde_json::from_value(manifest.meta["losses"].clone()).unwrap_or_default();
    Ok(ExpertPool {
        config,
        experts,
        provenance,
        losses,
    })
}
