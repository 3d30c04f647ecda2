//! Greedy value generation and in-context-learning prompts.

use crate::backbone::{forward, BackboneParams, PrefixExpert, Trainable};
use crate::corpus::{Dialogue, SlotId, Vocab, END_ANSWER, NONE_VALUE};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tape;
use crate::train::build_prompt;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Generated answers are cut off after this many tokens.
pub const MAX_ANSWER_LEN: usize = 8;

/// One predicted slot value at one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub turn: usize,
    pub domain: String,
    pub slot: String,
    pub predicted: String,
    pub reference: String,
}

/// Argmax over the last row of next-token logits; ties break to the
/// lowest token id.
fn greedy_next(
    params: &BackboneParams,
    expert: Option<&PrefixExpert>,
    tokens: &[u32],
) -> Result<u32> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, params, expert, Trainable::None, tokens)?;
    let logits = tape.value(fwd.logits);
    let vocab = logits.cols();
    let last = &logits.data()[(logits.rows() - 1) * vocab..];
    let mut best = 0usize;
    for (i, &l) in last.iter().enumerate() {
        if l > last[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Greedy decoding from `prompt` until the answer terminator or the
/// length cap. An empty answer reads as "none".
pub fn generate_value(
    params: &BackboneParams,
    vocab: &Vocab,
    expert: Option<&PrefixExpert>,
    prompt: &[u32],
    max_answer: usize,
) -> Result<String> {
    let end_id = vocab.id(END_ANSWER);
    let mut tokens = prompt.to_vec();
    let mut words = Vec::new();
    for _ in 0..max_answer {
        if tokens.len() >= params.config.max_context {
            break;
        }
        let next = greedy_next(params, expert, &tokens)?;
        if next == end_id {
            break;
        }
        words.push(vocab.word(next).to_string());
        tokens.push(next);
    }
    if words.is_empty() {
        return Ok(NONE_VALUE.to_string());
    }
    Ok(words.join(" "))
}

/// Predict the value of `slot` at `turn_idx` of `dialogue`.
pub fn predict_slot(
    params: &BackboneParams,
    vocab: &Vocab,
    expert: Option<&PrefixExpert>,
    dialogue: &Dialogue,
    turn_idx: usize,
    slot: &SlotId,
) -> Result<Prediction> {
    let prompt = build_prompt(
        vocab,
        params.config.max_context,
        dialogue,
        turn_idx,
        slot,
        MAX_ANSWER_LEN + 1,
    )?;
    let predicted = generate_value(params, vocab, expert, &prompt, MAX_ANSWER_LEN)?;
    let reference = dialogue.turns[turn_idx]
        .value_of(slot)
        .unwrap_or(NONE_VALUE)
        .to_string();
    Ok(Prediction {
        dialogue_id: dialogue.id.clone(),
        turn: turn_idx,
        domain: slot.domain.clone(),
        slot: slot.slot.clone(),
        predicted,
        reference,
    })
}

/// One compact exemplar: a single turn, its question, and the answer.
#[derive(Clone, Debug)]
pub struct Exemplar {
    pub tokens: Vec<u32>,
}

/// Sample `shots` single-turn exemplars with non-"none" answers from
/// the training dialogues, deterministically.
pub fn sample_exemplars(
    vocab: &Vocab,
    dialogues: &[Dialogue],
    shots: usize,
    seed: u64,
) -> Result<Vec<Exemplar>> {
    let mut candidates = Vec::new();
    for d in dialogues {
        for (t, turn) in d.turns.iter().enumerate() {
            for triple in &turn.state {
                candidates.push((d, t, SlotId::new(&triple.domain, &triple.slot), &triple.value));
            }
        }
    }
    if candidates.len() < shots {
        return Err(Error::contract(format!(
            "asked for {shots} exemplars but only {} are available",
            candidates.len()
        )));
    }
    let mut rng = substream(seed, "icl-exemplars");
    candidates.shuffle(&mut rng);
    candidates
        .into_iter()
        .take(shots)
        .map(|(d, t, slot, value)| {
            // single-turn rendering: only the turn where the value holds
            let one = Dialogue {
                id: d.id.clone(),
                domains: d.domains.clone(),
                turns: vec![d.turns[t].clone()],
            };
            let mut tokens = build_prompt(vocab, usize::MAX, &one, 0, &slot, 0)?;
            tokens.extend(vocab.encode(&format!("{value} {END_ANSWER}")));
            Ok(Exemplar { tokens })
        })
        .collect()
}

/// Exemplars followed by the real prompt. Oldest exemplars are dropped
/// first when the whole sequence would not fit.
pub fn build_icl_prompt(
    max_context: usize,
    exemplars: &[Exemplar],
    base_prompt: &[u32],
    answer_budget: usize,
) -> Result<Vec<u32>> {
    let budget = max_context
        .checked_sub(base_prompt.len() + answer_budget)
        .ok_or_else(|| Error::contract("prompt alone exceeds the context window"))?;
    let mut start = 0;
    let mut used: usize = exemplars.iter().map(|e| e.tokens.len()).sum();
    while used > budget && start < exemplars.len() {
        used -= exemplars[start].tokens.len();
        start += 1;
    }
    let mut tokens = Vec::new();
    for e in &exemplars[start..] {
        tokens.extend_from_slice(&e.tokens);
    }
    tokens.extend_from_slice(base_prompt);
    Ok(tokens)
}

/// Zero-or-few-shot prediction without any expert.
#[allow(clippy::too_many_arguments)]
pub fn predict_slot_icl(
    params: &BackboneParams,
    vocab: &Vocab,
    exemplars: &[Exemplar],
    dialogue: &Dialogue,
    turn_idx: usize,
    slot: &SlotId,
) -> Result<Prediction> {
    let base = build_prompt(
        vocab,
        params.config.max_context,
        dialogue,
        turn_idx,
        slot,
        MAX_ANSWER_LEN + 1,
    )?;
    let prompt = build_icl_prompt(
        params.config.max_context,
        exemplars,
        &base,
        MAX_ANSWER_LEN + 1,
    )?;
    let predicted = generate_value(params, vocab, None, &prompt, MAX_ANSWER_LEN)?;
    let reference = dialogue.turns[turn_idx]
        .value_of(slot)
        .unwrap_or(NONE_VALUE)
        .to_string();
    Ok(Prediction {
        dialogue_id: dialogue.id.clone(),
        turn: turn_idx,
        domain: slot.domain.clone(),
        slot: slot.slot.clone(),
        predicted,
        reference,
    })
}
