//! Slot featurization, k-means clustering, and nearest-centroid routing.
//!
//! Training slots are featurized (word embedding or hidden output),
//! clustered with Lloyd's algorithm under k-means++ seeding, and any
//! slot, seen or unseen, is assigned to the nearest centroid's expert.

use crate::backbone::{embedding_feature, hidden_feature, BackboneParams};
use crate::corpus::{Schema, SlotId, Vocab};
use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Embedding,
    Hidden,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(FeatureMode::Embedding),
            "hidden" => Ok(FeatureMode::Hidden),
            other => Err(Error::validation(format!("unknown feature mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureMode::Embedding => write!(f, "embedding"),
            FeatureMode::Hidden => write!(f, "hidden"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlotFeature {
    pub slot: SlotId,
    pub vector: Vec<f32>,
    pub mode: FeatureMode,
}

/// Featurize the "<domain> <slot-name>" text of a slot.
pub fn featurize(
    params: &BackboneParams,
    vocab: &Vocab,
    slot: &SlotId,
    mode: FeatureMode,
) -> Result<SlotFeature> {
    let tokens = vocab.encode(&slot.text());
    let vector = match mode {
        FeatureMode::Embedding => embedding_feature(params, &tokens)?,
        FeatureMode::Hidden => hidden_feature(params, &tokens)?,
    };
    if !vector.iter().all(|v| v.is_finite()) {
        return Err(Error::contract(format!("non-finite feature for {:?}", slot.text())));
    }
    Ok(SlotFeature {
        slot: slot.clone(),
        vector,
        mode,
    })
}

/// Fitted k-means model over training-slot features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub mode: FeatureMode,
    pub seed: u64,
    pub centroids: Vec<Vec<f32>>,
    /// "domain slot" -> cluster index
    pub assignments: BTreeMap<String, usize>,
}

impl ClusterModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("read {}: {e}", path.display())))?;
        let model: ClusterModel =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("cluster model: {e}")))?;
        if model.centroids.len() != model.k {
            return Err(Error::format(format!(
                "cluster model has {} centroids, k = {}",
                model.centroids.len(),
                model.k
            )));
        }
        Ok(model)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(x - y);
            d * d
        })
        .sum()
}

fn nearest(centroids: &[Vec<f32>], point: &[f32]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn within_cluster_sse(points: &[&[f32]], centroids: &[Vec<f32>], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm with k-means++ initialization.
///
/// Converges when assignments are stable or after 100 iterations.
/// Empty clusters are repaired by re-seeding the centroid at the point
/// farthest from its current centroid, at most 10 times.
pub fn fit_kmeans(features: &[SlotFeature], k: usize, seed: u64) -> Result<ClusterModel> {
    if features.is_empty() {
        return Err(Error::contract("fit_kmeans: empty feature list"));
    }
    if k < 1 {
        return Err(Error::contract("fit_kmeans: K must be >= 1"));
    }
    let mut distinct: Vec<&[f32]> = Vec::new();
    for f in features {
        if !distinct.iter().any(|d| *d == f.vector.as_slice()) {
            distinct.push(&f.vector);
        }
    }
    if k > distinct.len() {
        return Err(Error::contract(format!(
            "fit_kmeans: K = {k} exceeds {} distinct feature vectors",
            distinct.len()
        )));
    }
    let mode = features[0].mode;
    let points: Vec<&[f32]> = features.iter().map(|f| f.vector.as_slice()).collect();
    let mut rng = substream(seed, "kmeans");

    // k-means++ seeding
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].to_vec());
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(&centroids, p).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all points coincide with a centroid; pick any unused distinct point
            distinct
                .iter()
                .position(|p| !centroids.iter().any(|c| c.as_slice() == *p))
                .expect("k <= distinct points")
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(points[next].to_vec());
    }

    let dim = points[0].len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut prev_sse = f64::INFINITY;
    let mut repairs = 0usize;
    for _iter in 0..100 {
        // update step: centroids become member means
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(*p) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                if repairs >= 10 {
                    return Err(Error::contract(
                        "fit_kmeans: empty cluster persisted after 10 repairs",
                    ));
                }
                repairs += 1;
                // re-seed at the point farthest from its own centroid
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        sq_dist(points[i], &centroids[assign[i]])
                            .partial_cmp(&sq_dist(points[j], &centroids[assign[j]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far].to_vec();
            } else {
                centroids[c] = sums[c].iter().map(|&s| (s / counts[c] as f64) as f32).collect();
            }
        }

        let new_assign: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        let sse = within_cluster_sse(&points, &centroids, &new_assign);
        // Lloyd never increases the objective (small slack for f32 rounding)
        debug_assert!(
            sse <= prev_sse + 1e-9 * (1.0 + prev_sse.abs()),
            "SSE increased: {prev_sse} -> {sse}"
        );
        prev_sse = sse;
        if new_assign == assign {
            break;
        }
        assign = new_assign;
    }

    // no empty cluster after fit
    for c in 0..k {
        if !assign.contains(&c) {
            return Err(Error::contract(format!("fit_kmeans: cluster {c} is empty after fit")));
        }
    }

    let assignments = features
        .iter()
        .zip(&assign)
        .map(|(f, &a)| (f.slot.text(), a))
        .collect();
    Ok(ClusterModel {
        k,
        mode,
        seed,
        centroids,
        assignments,
    })
}

/// Nearest centroid by Euclidean distance; ties break to the lowest index.
pub fn assign_nearest(model: &ClusterModel, feature: &SlotFeature) -> Result<usize> {
    let dim = model.centroids.first().map(Vec::len).unwrap_or(0);
    if feature.vector.len() != dim {
        return Err(Error::shape(format!(
            "feature length {} vs centroid width {dim}",
            feature.vector.len()
        )));
    }
    Ok(nearest(&model.centroids, &feature.vector).0)
}

/// Featurize every training slot of `schema` (held-out domain excluded)
/// and fit k-means.
pub fn cluster_slots(
    params: &BackboneParams,
    vocab: &Vocab,
    schema: &Schema,
    held_out: &str,
    mode: FeatureMode,
    k: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let slots = schema.train_slots(held_out);
    if slots.len() < k {
        return Err(Error::contract(format!(
            "cluster_slots: schema has {} train slots, K = {k}",
            slots.len()
        )));
    }
    let features = slots
        .iter()
        .map(|s| featurize(params, vocab, s, mode))
        .collect::<Result<Vec<_>>>()?;
    fit_kmeans(&features, k, seed)
}

/// Ablation baseline: a uniformly random expert per slot, seeded.
pub fn random_assignment(model: &ClusterModel, seed: u64) -> BTreeMap<String, usize> {
    let mut rng = substream(seed, "random-assign");
    model
        .assignments
        .keys()
        .map(|slot| (slot.clone(), rng.gen_range(0..model.k)))
        .collect()
}
