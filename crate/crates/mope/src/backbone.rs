//! Minimal decoder-only transformer with per-layer prefix injection into
//! attention keys and values, plus hidden-state extraction for slot
//! featurization.
//!
//! Blocks are pre-norm with a GELU feed-forward; input and output
//! embeddings are tied. Prefix slots carry no positional encoding, are
//! visible to every query position regardless of the causal mask, and
//! emit no outputs of their own.

use crate::ckpt;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::Path;

pub const ATTN_MASK_NEG: f32 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub prefix_len: usize,
}

impl BackboneConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        BackboneConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_context: 128,
            prefix_len: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_context == 0
        {
            return Err(Error::contract("config dimensions must be positive"));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total parameter count, a pure function of the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = 2 * d            // ln1
            + 4 * (d * d + d)            // q, k, v, o projections with bias
            + 2 * d                      // ln2
            + (d * f + f) + (f * d + d); // feed-forward
        self.vocab_size * d + self.max_context * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

/// Frozen transformer parameters. Output projection is tied to the token
/// embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

/// One prefix expert: a key and a value prefix matrix per layer, each of
/// logical shape `prefix_len x d_model` (2L matrices in total).
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixExpert {
    pub index: usize,
    pub key_prefix: Vec<Tensor>,
    pub value_prefix: Vec<Tensor>,
}

impl PrefixExpert {
    pub fn zeros(config: &BackboneConfig, index: usize) -> Self {
        let shape = vec![config.prefix_len, config.d_model];
        PrefixExpert {
            index,
            key_prefix: (0..config.n_layers).map(|_| Tensor::zeros(shape.clone())).collect(),
            value_prefix: (0..config.n_layers).map(|_| Tensor::zeros(shape.clone())).collect(),
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.key_prefix.first().map(|t| t.rows()).unwrap_or(0)
    }

    pub fn matrix_count(&self) -> usize {
        self.key_prefix.len() + self.value_prefix.len()
    }

    /// Named parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, (k, v)) in self.key_prefix.iter().zip(&self.value_prefix).enumerate() {
            out.push((format!("layer{l}.key_prefix"), k));
            out.push((format!("layer{l}.value_prefix"), v));
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, which) = name.split_once('.')?;
        let l: usize = layer.strip_prefix("layer")?.parse().ok()?;
        match which {
            "key_prefix" => self.key_prefix.get_mut(l),
            "value_prefix" => self.value_prefix.get_mut(l),
            _ => None,
        }
    }
}

fn randn(rng: &mut impl Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("valid normal");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("matching shape")
}

/// Random init: scaled normal (std 0.02) weights, layer-norm gains 1,
/// biases 0. Deterministic given the seed.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = substream(seed, "backbone-init");
    let d = config.d_model;
    let f = config.d_ff;
    let std = 0.02f32;
    let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("ones");
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_g: ones(d),
            ln1_b: Tensor::zeros(vec![d]),
            wq: randn(&mut rng, vec![d, d], std),
            bq: Tensor::zeros(vec![d]),
            wk: randn(&mut rng, vec![d, d], std),
            bk: Tensor::zeros(vec![d]),
            wv: randn(&mut rng, vec![d, d], std),
            bv: Tensor::zeros(vec![d]),
            wo: randn(&mut rng, vec![d, d], std),
            bo: Tensor::zeros(vec![d]),
            ln2_g: ones(d),
            ln2_b: Tensor::zeros(vec![d]),
            ff1_w: randn(&mut rng, vec![d, f], std),
            ff1_b: Tensor::zeros(vec![f]),
            ff2_w: randn(&mut rng, vec![f, d], std),
            ff2_b: Tensor::zeros(vec![d]),
        })
        .collect();
    Ok(BackboneParams {
        config: config.clone(),
        tok_emb: randn(&mut rng, vec![config.vocab_size, d], std),
        pos_emb: randn(&mut rng, vec![config.max_context, d], std),
        layers,
        lnf_g: ones(d),
        lnf_b: Tensor::zeros(vec![d]),
    })
}

/// Random prefix init for one expert, std 0.02.
pub fn init_prefix_expert(config: &BackboneConfig, index: usize, seed: u64) -> PrefixExpert {
    let mut rng = substream(seed, &format!("pool-init/{index}"));
    let shape = vec![config.prefix_len, config.d_model];
    let key_prefix = (0..config.n_layers)
        .map(|_| randn(&mut rng, shape.clone(), 0.02))
        .collect();
    let value_prefix = (0..config.n_layers)
        .map(|_| randn(&mut rng, shape.clone(), 0.02))
        .collect();
    PrefixExpert {
        index,
        key_prefix,
        value_prefix,
    }
}

impl BackboneParams {
    /// Named parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_g"), &layer.ln1_g));
            out.push((format!("layer{l}.ln1_b"), &layer.ln1_b));
            out.push((format!("layer{l}.wq"), &layer.wq));
            out.push((format!("layer{l}.bq"), &layer.bq));
            out.push((format!("layer{l}.wk"), &layer.wk));
            out.push((format!("layer{l}.bk"), &layer.bk));
            out.push((format!("layer{l}.wv"), &layer.wv));
            out.push((format!("layer{l}.bv"), &layer.bv));
            out.push((format!("layer{l}.wo"), &layer.wo));
            out.push((format!("layer{l}.bo"), &layer.bo));
            out.push((format!("layer{l}.ln2_g"), &layer.ln2_g));
            out.push((format!("layer{l}.ln2_b"), &layer.ln2_b));
            out.push((format!("layer{l}.ff1_w"), &layer.ff1_w));
            out.push((format!("layer{l}.ff1_b"), &layer.ff1_b));
            out.push((format!("layer{l}.ff2_w"), &layer.ff2_w));
            out.push((format!("layer{l}.ff2_b"), &layer.ff2_b));
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "lnf_g" => return Some(&mut self.lnf_g),
            "lnf_b" => return Some(&mut self.lnf_b),
            _ => {}
        }
        let (layer, which) = name.split_once('.')?;
        let l: usize = layer.strip_prefix("layer")?.parse().ok()?;
        let layer = self.layers.get_mut(l)?;
        Some(match which {
            "ln1_g" => &mut layer.ln1_g,
            "ln1_b" => &mut layer.ln1_b,
            "wq" => &mut layer.wq,
            "bq" => &mut layer.bq,
            "wk" => &mut layer.wk,
            "bk" => &mut layer.bk,
            "wv" => &mut layer.wv,
            "bv" => &mut layer.bv,
            "wo" => &mut layer.wo,
            "bo" => &mut layer.bo,
            "ln2_g" => &mut layer.ln2_g,
            "ln2_b" => &mut layer.ln2_b,
            "ff1_w" => &mut layer.ff1_w,
            "ff1_b" => &mut layer.ff1_b,
            "ff2_w" => &mut layer.ff2_w,
            "ff2_b" => &mut layer.ff2_b,
            _ => return None,
        })
    }
}

/// Result of a forward pass over one token sequence.
pub struct Forward {
    /// `[T, vocab]` next-token logits.
    pub logits: NodeId,
    /// `[T, d_model]` final-layer post-norm hidden states.
    pub hiddens: NodeId,
    /// Attention softmax nodes, `[layer][head]`, rows of width p + T.
    pub attn: Vec<Vec<NodeId>>,
    /// Trainable parameter name -> tape node, depending on the
    /// [`Trainable`] mode of the call.
    pub param_nodes: BTreeMap<String, NodeId>,
}

/// Which parameter group the tape should track gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Pure inference.
    None,
    /// Gradients flow only into the attached expert's prefixes.
    Prefix,
    /// Gradients flow into every backbone weight.
    Backbone,
}

/// Run the transformer over `tokens`, optionally injecting a prefix
/// expert at every layer.
pub fn forward(
    tape: &mut Tape,
    params: &BackboneParams,
    expert: Option<&PrefixExpert>,
    trainable: Trainable,
    tokens: &[u32],
) -> Result<Forward> {
    let cfg = &params.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::contract("forward: empty token sequence"));
    }
    if t_len > cfg.max_context {
        return Err(Error::contract(format!(
            "forward: sequence length {t_len} exceeds max_context {}",
            cfg.max_context
        )));
    }
    if let Some(e) = expert {
        if e.matrix_count() != 2 * cfg.n_layers {
            return Err(Error::shape(format!(
                "expert has {} prefix matrices, expected {}",
                e.matrix_count(),
                2 * cfg.n_layers
            )));
        }
        for t in e.key_prefix.iter().chain(&e.value_prefix) {
            if t.cols() != cfg.d_model {
                return Err(Error::shape(format!(
                    "prefix width {} != d_model {}",
                    t.cols(),
                    cfg.d_model
                )));
            }
        }
    }
    let p = expert.map(|e| e.prefix_len()).unwrap_or(0);
    let dh = cfg.head_width();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..t_len).collect();

    let mut param_nodes = BTreeMap::new();
    let train_backbone = trainable == Trainable::Backbone;
    fn reg(
        tape: &mut Tape,
        nodes: &mut BTreeMap<String, NodeId>,
        train: bool,
        t: &Tensor,
        name: String,
    ) -> NodeId {
        if train {
            let id = tape.param(t.clone());
            nodes.insert(name, id);
            id
        } else {
            tape.leaf(t.clone())
        }
    }

    let tok_emb = reg(tape, &mut param_nodes, train_backbone, &params.tok_emb, "tok_emb".into());
    let pos_emb = reg(tape, &mut param_nodes, train_backbone, &params.pos_emb, "pos_emb".into());
    let te = tape.gather_rows(tok_emb, &ids)?;
    let pe = tape.gather_rows(pos_emb, &positions)?;
    let mut x = tape.add(te, pe)?;

    // causal mask with p always-visible prefix columns
    let mask = {
        let mut m = vec![0.0f32; t_len * (p + t_len)];
        for (i, row) in m.chunks_exact_mut(p + t_len).enumerate() {
            for (j, v) in row.iter_mut().enumerate().skip(p) {
                if j - p > i {
                    *v = ATTN_MASK_NEG;
                }
            }
        }
        Tensor::new(vec![t_len, p + t_len], m)?
    };

    let mut attn_nodes = Vec::with_capacity(cfg.n_layers);
    let scale = 1.0 / (dh as f32).sqrt();

    for (l, layer) in params.layers.iter().enumerate() {
        let ln1_g = reg(tape, &mut param_nodes, train_backbone, &layer.ln1_g, format!("layer{l}.ln1_g"));
        let ln1_b = reg(tape, &mut param_nodes, train_backbone, &layer.ln1_b, format!("layer{l}.ln1_b"));
        let h = tape.layer_norm(x, ln1_g, ln1_b, 1e-5)?;

        let wq = reg(tape, &mut param_nodes, train_backbone, &layer.wq, format!("layer{l}.wq"));
        let bq = reg(tape, &mut param_nodes, train_backbone, &layer.bq, format!("layer{l}.bq"));
        let wk = reg(tape, &mut param_nodes, train_backbone, &layer.wk, format!("layer{l}.wk"));
        let bk = reg(tape, &mut param_nodes, train_backbone, &layer.bk, format!("layer{l}.bk"));
        let wv = reg(tape, &mut param_nodes, train_backbone, &layer.wv, format!("layer{l}.wv"));
        let bv = reg(tape, &mut param_nodes, train_backbone, &layer.bv, format!("layer{l}.bv"));
        let q = tape.matmul(h, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(h, wk)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(h, wv)?;
        let v = tape.add_bias(v, bv)?;

        // prefixes bypass the K/V projections: they are concatenated at
        // the K_l / V_l level
        let (pk, pv) = match expert {
            Some(e) if p > 0 => {
                let train_prefix = trainable == Trainable::Prefix;
                let pk = reg(
                    tape,
                    &mut param_nodes,
                    train_prefix,
                    &e.key_prefix[l],
                    format!("layer{l}.key_prefix"),
                );
                let pv = reg(
                    tape,
                    &mut param_nodes,
                    train_prefix,
                    &e.value_prefix[l],
                    format!("layer{l}.value_prefix"),
                );
                (Some(pk), Some(pv))
            }
            _ => (None, None),
        };

        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        let mut head_attn = Vec::with_capacity(cfg.n_heads);
        for hix in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hix * dh, dh)?;
            let kh = tape.slice_cols(k, hix * dh, dh)?;
            let vh = tape.slice_cols(v, hix * dh, dh)?;
            let (keff, veff) = match (pk, pv) {
                (Some(pk), Some(pv)) => {
                    let pkh = tape.slice_cols(pk, hix * dh, dh)?;
                    let pvh = tape.slice_cols(pv, hix * dh, dh)?;
                    (tape.concat_rows(pkh, kh)?, tape.concat_rows(pvh, vh)?)
                }
                _ => (kh, vh),
            };
            let scores = tape.matmul_bt(qh, keff)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, mask.clone())?;
            let a = tape.softmax_rows(scores);
            head_attn.push(a);
            head_outs.push(tape.matmul(a, veff)?);
        }
        attn_nodes.push(head_attn);
        let merged = tape.concat_cols(&head_outs)?;
        let wo = reg(tape, &mut param_nodes, train_backbone, &layer.wo, format!("layer{l}.wo"));
        let bo = reg(tape, &mut param_nodes, train_backbone, &layer.bo, format!("layer{l}.bo"));
        let attn_out = tape.matmul(merged, wo)?;
        let attn_out = tape.add_bias(attn_out, bo)?;
        x = tape.add(x, attn_out)?;

        let ln2_g = reg(tape, &mut param_nodes, train_backbone, &layer.ln2_g, format!("layer{l}.ln2_g"));
        let ln2_b = reg(tape, &mut param_nodes, train_backbone, &layer.ln2_b, format!("layer{l}.ln2_b"));
        let h2 = tape.layer_norm(x, ln2_g, ln2_b, 1e-5)?;
        let ff1_w = reg(tape, &mut param_nodes, train_backbone, &layer.ff1_w, format!("layer{l}.ff1_w"));
        let ff1_b = reg(tape, &mut param_nodes, train_backbone, &layer.ff1_b, format!("layer{l}.ff1_b"));
        let ff2_w = reg(tape, &mut param_nodes, train_backbone, &layer.ff2_w, format!("layer{l}.ff2_w"));
        let ff2_b = reg(tape, &mut param_nodes, train_backbone, &layer.ff2_b, format!("layer{l}.ff2_b"));
        let f = tape.matmul(h2, ff1_w)?;
        let f = tape.add_bias(f, ff1_b)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, ff2_w)?;
        let f = tape.add_bias(f, ff2_b)?;
        x = tape.add(x, f)?;
    }

    let lnf_g = reg(tape, &mut param_nodes, train_backbone, &params.lnf_g, "lnf_g".into());
    let lnf_b = reg(tape, &mut param_nodes, train_backbone, &params.lnf_b, "lnf_b".into());
    let hn = tape.layer_norm(x, lnf_g, lnf_b, 1e-5)?;
    // output projection tied to the token embedding
    let logits = tape.matmul_bt(hn, tok_emb)?;

    Ok(Forward {
        logits,
        hiddens: hn,
        attn: attn_nodes,
        param_nodes,
    })
}

/// Final-layer hidden state at the last token of the slot text, no
/// expert attached.
pub fn hidden_feature(params: &BackboneParams, tokens: &[u32]) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::contract("hidden_feature: empty token sequence"));
    }
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, params, None, Trainable::None, tokens)?;
    let h = tape.value(fwd.hiddens);
    let d = h.cols();
    let last = h.rows() - 1;
    Ok(h.data()[last * d..(last + 1) * d].to_vec())
}

/// Mean of the token-embedding rows of the slot text.
pub fn embedding_feature(params: &BackboneParams, tokens: &[u32]) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::contract("embedding_feature: empty token sequence"));
    }
    let d = params.config.d_model;
    let mut acc = vec![0.0f32; d];
    for &t in tokens {
        let t = t as usize;
        if t >= params.config.vocab_size {
            return Err(Error::contract(format!("token id {t} out of vocab")));
        }
        for (a, v) in acc.iter_mut().zip(&params.tok_emb.data()[t * d..(t + 1) * d]) {
            *a += v;
        }
    }
    let n = tokens.len() as f32;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// Write a backbone checkpoint (config and vocabulary in the manifest).
pub fn save_backbone(params: &BackboneParams, vocab: &Vocab, path: &Path) -> Result<()> {
    let named = params.named_params();
    ckpt::save(
        path,
        "backbone",
        json!({"config": params.config, "vocab": vocab.words()}),
        &named,
    )
}

pub fn load_backbone(path: &Path) -> Result<(BackboneParams, Vocab)> {
    let (manifest, tensors) = ckpt::load(path, "backbone")?;
    let config: BackboneConfig = serde_json::from_value(manifest.meta["config"].clone())
        .map_err(|e| Error::format(format!("backbone config: {e}")))?;
    let words: Vec<String> = serde_json::from_value(manifest.meta["vocab"].clone())
        .map_err(|e| Error::format(format!("backbone vocab: {e}")))?;
    let mut vocab: Vocab = serde_json::from_value(json!({ "words": words }))
        .map_err(|e| Error::format(format!("backbone vocab: {e}")))?;
    vocab.reindex();

    let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor> {
        let t = map
            .remove(&name)
            .ok_or_else(|| Error::format(format!("missing parameter {name:?}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(format!(
                "parameter {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let d = config.d_model;
    let f = config.d_ff;
    let tok_emb = take("tok_emb".into(), vec![config.vocab_size, d])?;
    let pos_emb = take("pos_emb".into(), vec![config.max_context, d])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_g: take(format!("layer{l}.ln1_g"), vec![d])?,
            ln1_b: take(format!("layer{l}.ln1_b"), vec![d])?,
            wq: take(format!("layer{l}.wq"), vec![d, d])?,
            bq: take(format!("layer{l}.bq"), vec![d])?,
            wk: take(format!("layer{l}.wk"), vec![d, d])?,
            bk: take(format!("layer{l}.bk"), vec![d])?,
            wv: take(format!("layer{l}.wv"), vec![d, d])?,
            bv: take(format!("layer{l}.bv"), vec![d])?,
            wo: take(format!("layer{l}.wo"), vec![d, d])?,
            bo: take(format!("layer{l}.bo"), vec![d])?,
            ln2_g: take(format!("layer{l}.ln2_g"), vec![d])?,
            ln2_b: take(format!("layer{l}.ln2_b"), vec![d])?,
            ff1_w: take(format!("layer{l}.ff1_w"), vec![d, f])?,
            ff1_b: take(format!("layer{l}.ff1_b"), vec![f])?,
            ff2_w: take(format!("layer{l}.ff2_w"), vec![f, d])?,
            ff2_b: take(format!("layer{l}.ff2_b"), vec![d])?,
        });
    }
    let lnf_g = take("lnf_g".into(), vec![d])?;
    let lnf_b = take("lnf_b".into(), vec![d])?;
    Ok((
        BackboneParams {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
        },
        vocab,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 20,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_context: 16,
            prefix_len: 4,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = init_backbone(&cfg, 11).unwrap();
        let b = init_backbone(&cfg, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_width_divides() {
        let cfg = BackboneConfig::with_vocab(100);
        assert_eq!(cfg.head_width(), 16);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = BackboneConfig::with_vocab(300);
        let params = init_backbone(&cfg, 0).unwrap();
        // closed form recomputed by hand from the shapes
        let d = 64usize;
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * 128 + 128) + (128 * d + d);
        let want = 300 * d + 128 * d + 4 * per_layer + 2 * d;
        assert_eq!(cfg.param_count(), want);
        assert_eq!(params.param_count(), want);
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &params, None, Trainable::None, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(fwd.logits).shape(), &[3, 20]);
        assert_eq!(tape.value(fwd.hiddens).shape(), &[3, 16]);
    }

    #[test]
    fn single_token_hidden_shape() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &params, None, Trainable::None, &[5]).unwrap();
        assert_eq!(tape.value(fwd.hiddens).shape(), &[1, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 2).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &params, None, Trainable::None, &[1, 2, 3, 4]).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn capacity_error_past_max_context() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let tokens: Vec<u32> = (0..17).map(|i| i % 20).collect();
        assert!(forward(&mut tape, &params, None, Trainable::None, &tokens).is_err());
    }

    #[test]
    fn attention_rows_cover_prefix_and_sum_to_one() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 3).unwrap();
        let expert = init_prefix_expert(&cfg, 0, 3);
        let n = 7usize;
        let p = cfg.prefix_len;
        let mut tape = Tape::new();
        let tokens: Vec<u32> = (0..n as u32).collect();
        let fwd = forward(&mut tape, &params, Some(&expert), Trainable::None, &tokens).unwrap();
        for heads in &fwd.attn {
            for &a in heads {
                let t = tape.value(a);
                assert_eq!(t.shape(), &[n, p + n]);
                for i in 0..n {
                    let row = &t.data()[i * (p + n)..(i + 1) * (p + n)];
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-5);
                    // causally hidden positions carry no mass
                    for (j, &w) in row.iter().enumerate().skip(p) {
                        if j - p > i {
                            assert!(w < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn no_prefix_equals_plain_causal_attention() {
        // expert absent vs a degenerate p=0 expert, bit-exact
        let mut cfg = tiny_config();
        let params = init_backbone(&cfg, 4).unwrap();
        let tokens = [1u32, 5, 9, 2];
        let mut t1 = Tape::new();
        let f1 = forward(&mut t1, &params, None, Trainable::None, &tokens).unwrap();
        cfg.prefix_len = 0;
        let empty = PrefixExpert::zeros(&cfg, 0);
        let mut t2 = Tape::new();
        let f2 = forward(&mut t2, &params, Some(&empty), Trainable::None, &tokens).unwrap();
        assert_eq!(t1.value(f1.logits).data(), t2.value(f2.logits).data());
    }

    #[test]
    fn zero_prefix_spreads_mass_evenly_over_prefix_slots() {
        // zero prefix keys give equal logits on prefix columns, so the
        // prefix mass splits evenly among the p slots
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 5).unwrap();
        let expert = PrefixExpert::zeros(&cfg, 0);
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &params, Some(&expert), Trainable::None, &[1, 2, 3]).unwrap();
        let p = cfg.prefix_len;
        let a = tape.value(fwd.attn[0][0]);
        let w = a.cols();
        for i in 0..3 {
            let row = &a.data()[i * w..(i + 1) * w];
            for j in 1..p {
                assert!((row[j] - row[0]).abs() <= 1e-6, "row {i}: {row:?}");
            }
        }
    }

    #[test]
    fn gradients_reach_layer1_prefix() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 6).unwrap();
        let expert = init_prefix_expert(&cfg, 0, 6);
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &params, Some(&expert), Trainable::Prefix, &[1, 2, 3, 4]).unwrap();
        let loss = tape
            .cross_entropy(fwd.logits, &[2, 3, 4, 5], &[1, 1, 1, 1])
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let k0 = fwd.param_nodes["layer0.key_prefix"];
        let v0 = fwd.param_nodes["layer0.value_prefix"];
        let nonzero = grads[&k0.0].data().iter().any(|&g| g != 0.0)
            || grads[&v0.0].data().iter().any(|&g| g != 0.0);
        assert!(nonzero);
    }

    #[test]
    fn hidden_feature_shape_and_determinism() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 7).unwrap();
        let a = hidden_feature(&params, &[4, 9]).unwrap();
        let b = hidden_feature(&params, &[4, 9]).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        assert!(hidden_feature(&params, &[]).is_err());
    }

    #[test]
    fn embedding_feature_single_token_and_mean() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 8).unwrap();
        let d = cfg.d_model;
        let single = embedding_feature(&params, &[3]).unwrap();
        assert_eq!(single, params.tok_emb.data()[3 * d..4 * d].to_vec());
        // permutation invariance and hand-averaged oracle
        let ab = embedding_feature(&params, &[3, 7]).unwrap();
        let ba = embedding_feature(&params, &[7, 3]).unwrap();
        assert_eq!(ab, ba);
        for (j, v) in ab.iter().enumerate() {
            let want = (params.tok_emb.data()[3 * d + j] + params.tok_emb.data()[7 * d + j]) / 2.0;
            assert!((v - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let params = init_backbone(&cfg, 9).unwrap();
        let vocab = build_vocab(&["a b c d"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb");
        save_backbone(&params, &vocab, &path).unwrap();
        let (loaded, lvocab) = load_backbone(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(lvocab.words(), vocab.words());
        assert_eq!(lvocab.id("b"), vocab.id("b"));
    }
}
