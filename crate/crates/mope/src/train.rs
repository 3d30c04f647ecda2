//! Prompt construction, AdamW, language-model pretraining, and
//! per-cluster prefix-expert training against a frozen backbone.

use crate::backbone::{forward, BackboneParams, PrefixExpert, Trainable};
use crate::corpus::{Dialogue, SlotId, Vocab, END_ANSWER, NONE_VALUE};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

pub const PRETRAIN_LR: f32 = 3e-4;
pub const PRETRAIN_EPOCHS: usize = 3;
pub const EXPERT_LR: f32 = 1e-2;
pub const BATCH_SIZE: usize = 8;
pub const GRAD_CLIP: f32 = 1.0;
pub const QA_DIALOGUES: usize = 8;
pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
pub const WEIGHT_DECAY: f32 = 0.01;

/// One next-token training sequence. Position `i` predicts `targets[i]`
/// wherever `mask[i] == 1`.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<usize>,
    pub mask: Vec<u8>,
    pub prompt_len: usize,
}

fn turn_text(turn: &crate::corpus::Turn) -> String {
    format!("system : {} user : {}", turn.system, turn.user)
}

/// Question suffix for one slot.
pub fn question_text(slot: &SlotId) -> String {
    format!("question : what is the value of {} ? answer :", slot.text())
}

/// Prompt for value prediction at `turn_idx`: the dialogue history so
/// far plus the slot question. Oldest turns are dropped first when the
/// prompt and its answer would not fit into `max_context`.
pub fn build_prompt(
    vocab: &Vocab,
    max_context: usize,
    dialogue: &Dialogue,
    turn_idx: usize,
    slot: &SlotId,
    answer_budget: usize,
) -> Result<Vec<u32>> {
    if turn_idx >= dialogue.turns.len() {
        return Err(Error::contract(format!(
            "turn {turn_idx} out of range for dialogue {:?}",
            dialogue.id
        )));
    }
    let head = vocab.encode("dialogue :");
    let question = vocab.encode(&question_text(slot));
    let turns: Vec<Vec<u32>> = dialogue.turns[..=turn_idx]
        .iter()
        .map(|t| vocab.encode(&turn_text(t)))
        .collect();
    let budget = max_context
        .checked_sub(head.len() + question.len() + answer_budget)
        .ok_or_else(|| Error::contract("context too small for prompt template"))?;
    let mut start = 0;
    let mut used: usize = turns.iter().map(Vec::len).sum();
    while used > budget && start < turns.len() {
        used -= turns[start].len();
        start += 1;
    }
    if used > budget {
        return Err(Error::contract("single turn exceeds context budget"));
    }
    let mut tokens = head;
    for t in &turns[start..] {
        tokens.extend_from_slice(t);
    }
    tokens.extend_from_slice(&question);
    Ok(tokens)
}

/// Teacher-forced example for one (dialogue, turn, slot): loss only on
/// the answer tokens. Absent slots get the answer "none".
pub fn build_example(
    vocab: &Vocab,
    max_context: usize,
    dialogue: &Dialogue,
    turn_idx: usize,
    slot: &SlotId,
) -> Result<Example> {
    let value = dialogue.turns[turn_idx]
        .value_of(slot)
        .unwrap_or(NONE_VALUE)
        .to_string();
    let answer = vocab.encode(&format!("{value} {END_ANSWER}"));
    let prompt = build_prompt(vocab, max_context, dialogue, turn_idx, slot, answer.len())?;
    let prompt_len = prompt.len();
    let mut tokens = prompt;
    tokens.extend_from_slice(&answer);
    let n = tokens.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![0u8; n];
    for i in 0..n - 1 {
        targets[i] = tokens[i + 1] as usize;
        if i + 1 >= prompt_len {
            mask[i] = 1;
        }
    }
    Ok(Example {
        tokens,
        targets,
        mask,
        prompt_len,
    })
}

/// Plain language-model example over a whole dialogue, loss everywhere.
pub fn lm_example(vocab: &Vocab, max_context: usize, dialogue: &Dialogue) -> Result<Example> {
    let mut tokens = vocab.encode("dialogue :");
    for turn in &dialogue.turns {
        tokens.extend(vocab.encode(&turn_text(turn)));
    }
    if tokens.len() > max_context {
        tokens.drain(..tokens.len() - max_context);
    }
    if tokens.len() < 2 {
        return Err(Error::contract("dialogue too short for a language-model example"));
    }
    let n = tokens.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![0u8; n];
    for i in 0..n - 1 {
        targets[i] = tokens[i + 1] as usize;
        mask[i] = 1;
    }
    Ok(Example {
        tokens,
        targets,
        mask,
        prompt_len: 0,
    })
}

/// Every (turn, slot) example over `dialogues` for the given slots.
/// Slots are only asked of dialogues whose domains mention them, so the
/// "none" class reflects genuinely unfilled slots rather than
/// unmentioned domains.
pub fn examples_for_slots(
    vocab: &Vocab,
    max_context: usize,
    dialogues: &[Dialogue],
    slots: &[SlotId],
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in 0..d.turns.len() {
            for slot in slots {
                if !d.domains.contains(&slot.domain) {
                    continue;
                }
                out.push(build_example(vocab, max_context, d, t, slot)?);
            }
        }
    }
    Ok(out)
}

/// Keep a seeded uniform sample of about `fraction` of `items`.
pub fn sample_fraction<T>(items: &mut Vec<T>, fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation(format!("fraction {fraction} outside [0, 1]")));
    }
    let mut rng = substream(seed, "fraction-sample");
    let mut i = 0;
    while i < items.len() {
        if rng.gen::<f64>() < fraction {
            i += 1;
        } else {
            items.remove(i);
        }
    }
    Ok(())
}

/// AdamW with decoupled weight decay and bias correction. Moment state
/// is keyed by parameter name.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the step counter that drives bias correction. Call once
    /// per batch, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply the current step's update to one parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if self.t == 0 {
            return Err(Error::contract("AdamW::update before begin_step"));
        }
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "grad shape {:?} != param shape {:?} for {name:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let n = param.numel();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
        Ok(())
    }
}

/// Anything with named, individually addressable parameters.
trait ParamStore {
    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for BackboneParams {
    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_mut(name)
    }
}

impl ParamStore for PrefixExpert {
    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_mut(name)
    }
}

fn apply_step(
    opt: &mut AdamW,
    store: &mut dyn ParamStore,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    opt.begin_step();
    for (name, grad) in grads {
        let param = store
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        opt.update(name, param, grad)?;
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f32) {
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&g| f64::from(g) * f64::from(g))
        .sum();
    let norm = sq.sqrt();
    if norm > f64::from(max_norm) {
        let scale = (f64::from(max_norm) / norm) as f32;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
}

/// Mean loss and named parameter gradients for one example.
fn example_grads(
    params: &BackboneParams,
    expert: Option<&PrefixExpert>,
    trainable: Trainable,
    ex: &Example,
) -> Result<(f32, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, params, expert, trainable, &ex.tokens)?;
    let loss = tape.cross_entropy(fwd.logits, &ex.targets, &ex.mask)?;
    let loss_val = tape.value(loss).data()[0];
    let node_grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, node) in &fwd.param_nodes {
        if let Some(g) = node_grads.get(&node.0) {
            named.insert(name.clone(), g.clone());
        }
    }
    Ok((loss_val, named))
}

fn accumulate(total: &mut BTreeMap<String, Tensor>, part: BTreeMap<String, Tensor>) {
    for (name, g) in part {
        match total.entry(name) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(g);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                for (a, b) in e.get_mut().data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, scale: f32) {
    for t in grads.values_mut() {
        for g in t.data_mut() {
            *g *= scale;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean loss per epoch, in order.
    pub epoch_losses: Vec<f32>,
}

/// Next-token pretraining of the whole backbone over flattened
/// dialogues.
pub fn pretrain(
    params: &mut BackboneParams,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    slots: &[SlotId],
    qa_limit: usize,
    seed: u64,
    epochs: usize,
    lr: f32,
    batch_size: usize,
) -> Result<TrainReport> {
    if dialogues.is_empty() {
        return Err(Error::contract("pretrain: no dialogues"));
    }
    let max_context = params.config.max_context;
    let mut examples: Vec<Example> = dialogues
        .iter()
        .map(|d| lm_example(vocab, max_context, d))
        .collect::<Result<_>>()?;
    // The backbone stands in for a pretrained language model that can
    // locate answers but does not follow the exact answer format, so
    // its stream also flattens raw question-answer text over every
    // annotated dialogue: filled slots only, the bare value with no
    // terminator, and no "none" answers. Producing the strict
    // "value </a>" / "none </a>" format is left for prefix tuning to
    // teach. Unannotated dialogues (empty domain list) contribute plain
    // text only.
    for d in dialogues.iter().filter(|d| !d.domains.is_empty()) {
        for t in 0..d.turns.len() {
            for slot in slots {
                let Some(value) = d.turns[t].value_of(slot) else {
                    continue;
                };
                let answer = vocab.encode(value);
                let prompt = build_prompt(vocab, max_context, d, t, slot, answer.len())?;
                let mut tokens = prompt;
                tokens.extend_from_slice(&answer);
                let n = tokens.len();
                let mut targets = vec![0usize; n];
                let mut mask = vec![0u8; n];
                for i in 0..n - 1 {
                    targets[i] = tokens[i + 1] as usize;
                    mask[i] = 1;
                }
                examples.push(Example {
                    tokens,
                    targets,
                    mask,
                    prompt_len: 0,
                });
            }
        }
    }
    // A small number of dialogues also contribute strictly formatted
    // question-answer text over the full slot grid. This keeps the
    // format tokens ("none", the terminator) in live use without making
    // the backbone a format follower on its own.
    for d in dialogues.iter().filter(|d| !d.domains.is_empty()).take(qa_limit) {
        for t in 0..d.turns.len() {
            for slot in slots {
                let mut ex = build_example(vocab, max_context, d, t, slot)?;
                let n = ex.tokens.len();
                for i in 0..n - 1 {
                    ex.mask[i] = 1;
                }
                examples.push(ex);
            }
        }
    }
    let mut opt = AdamW::new(lr, WEIGHT_DECAY);
    let mut rng = substream(seed, "pretrain-order");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(batch_size) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let (loss, g) = example_grads(params, None, Trainable::Backbone, &examples[i])?;
                loss_sum += f64::from(loss);
                accumulate(&mut grads, g);
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f32);
            clip_global_norm(&mut grads, GRAD_CLIP);
            apply_step(&mut opt, params, &grads)?;
        }
        epoch_losses.push((loss_sum / examples.len() as f64) as f32);
    }
    Ok(TrainReport { epoch_losses })
}

/// Prefix tuning of one expert against a frozen backbone.
pub fn train_expert(
    params: &BackboneParams,
    expert: &mut PrefixExpert,
    examples: &[Example],
    seed: u64,
    epochs: usize,
    lr: f32,
    batch_size: usize,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::contract("train_expert: no examples"));
    }
    let frozen = params.clone();
    let mut opt = AdamW::new(lr, WEIGHT_DECAY);
    let mut rng = substream(seed, &format!("expert-order/{}", expert.index));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(batch_size) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let (loss, g) =
                    example_grads(params, Some(expert), Trainable::Prefix, &examples[i])?;
                loss_sum += f64::from(loss);
                accumulate(&mut grads, g);
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f32);
            clip_global_norm(&mut grads, GRAD_CLIP);
            apply_step(&mut opt, expert, &grads)?;
        }
        epoch_losses.push((loss_sum / examples.len() as f64) as f32);
    }
    debug_assert_eq!(&frozen, params, "backbone must stay frozen");
    Ok(TrainReport { epoch_losses })
}
