//! Dialogue data model, word-level tokenizer, corpus loader, and the
//! seeded synthetic multi-domain corpus generator.
//!
//! The synthetic corpus reproduces the structural premise that makes
//! slot routing meaningful: several domains share slot families (area,
//! price, day, time, people, name) and draw values from the same
//! lexicons, while a held-out domain appears only in the test split.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const END_ANSWER: &str = "</a>";
pub const ANSWER_WORD: &str = "answer";
pub const NONE_VALUE: &str = "none";

/// Words of the QA prompt template; always folded into the vocabulary.
pub const TEMPLATE_WORDS: &[&str] = &[
    "dialogue", ":", "system", "user", "question", "what", "is", "the", "value", "of", "?",
    NONE_VALUE,
];

/// A (domain, slot-name) pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId {
    pub domain: String,
    pub slot: String,
}

impl SlotId {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        SlotId {
            domain: domain.into(),
            slot: slot.into(),
        }
    }

    /// Space-joined "<domain> <slot-name>" text used for featurization
    /// and as the key in persisted cluster models.
    pub fn text(&self) -> String {
        format!("{} {}", self.domain, self.slot)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut it = text.splitn(2, ' ');
        let domain = it.next().unwrap_or_default();
        let slot = it
            .next()
            .ok_or_else(|| Error::format(format!("slot key without domain: {text:?}")))?;
        Ok(SlotId::new(domain, slot))
    }
}

/// Domain -> ordered slot list, plus the value lexicon per slot family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub domains: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub lexicon: BTreeMap<String, Vec<String>>,
}

impl Schema {
    pub fn slots_of(&self, domain: &str) -> Result<Vec<SlotId>> {
        let slots = self
            .domains
            .get(domain)
            .ok_or_else(|| Error::validation(format!("unknown domain {domain:?}")))?;
        Ok(slots.iter().map(|s| SlotId::new(domain, s.clone())).collect())
    }

    pub fn all_slots(&self) -> Vec<SlotId> {
        self.domains
            .iter()
            .flat_map(|(d, slots)| slots.iter().map(move |s| SlotId::new(d.clone(), s.clone())))
            .collect()
    }

    /// Slots of every domain except `held_out`.
    pub fn train_slots(&self, held_out: &str) -> Vec<SlotId> {
        self.all_slots()
            .into_iter()
            .filter(|s| s.domain != held_out)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateTriple {
    pub domain: String,
    pub slot: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub system: String,
    pub user: String,
    pub state: Vec<StateTriple>,
}

impl Turn {
    pub fn value_of(&self, slot: &SlotId) -> Option<&str> {
        self.state
            .iter()
            .find(|t| t.domain == slot.domain && t.slot == slot.slot)
            .map(|t| t.value.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub domains: Vec<String>,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: Schema,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for (domain, slots) in &self.schema.domains {
            let mut seen = BTreeSet::new();
            for s in slots {
                if !seen.insert(s) {
                    return Err(Error::validation(format!(
                        "duplicate slot {s:?} in domain {domain:?}"
                    )));
                }
            }
        }
        for d in &self.dialogues {
            if d.turns.is_empty() {
                return Err(Error::validation(format!("dialogue {:?} has no turns", d.id)));
            }
            let mut prev: BTreeSet<(String, String)> = BTreeSet::new();
            for (t, turn) in d.turns.iter().enumerate() {
                let mut keys = BTreeSet::new();
                for triple in &turn.state {
                    if triple.value.is_empty() {
                        return Err(Error::validation(format!(
                            "dialogue {:?} turn {t}: empty value for {} {}",
                            d.id, triple.domain, triple.slot
                        )));
                    }
                    if triple.value == NONE_VALUE {
                        return Err(Error::validation(format!(
                            "dialogue {:?} turn {t}: literal none value (absence encodes none)",
                            d.id
                        )));
                    }
                    if !self.schema.domains.contains_key(&triple.domain) {
                        return Err(Error::validation(format!(
                            "dialogue {:?} turn {t}: unknown domain {:?}",
                            d.id, triple.domain
                        )));
                    }
                    if !keys.insert((triple.domain.clone(), triple.slot.clone())) {
                        return Err(Error::validation(format!(
                            "dialogue {:?} turn {t}: duplicate (domain, slot) {} {}",
                            d.id, triple.domain, triple.slot
                        )));
                    }
                }
                // belief states are cumulative
                for key in &prev {
                    if !keys.contains(key) {
                        return Err(Error::validation(format!(
                            "dialogue {:?} turn {t}: state dropped {} {}",
                            d.id, key.0, key.1
                        )));
                    }
                }
                prev = keys;
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            dialogues: self.dialogues.len(),
            turns: self.dialogues.iter().map(|d| d.turns.len()).sum(),
            slots: self.schema.all_slots().len(),
            domains: self.schema.domains.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub turns: usize,
    pub slots: usize,
    pub domains: usize,
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("read {}: {e}", path.display())))?;
    let corpus: Corpus = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("parse {}: {e}", path.display())))?;
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(corpus)?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Word-level vocabulary with reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Reserved ids, in order: pad, unknown, end-of-answer, "answer".
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const END_ID: u32 = 2;
    pub const ANSWER_ID: u32 = 3;

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Whitespace word vocabulary: lowercased, frequency-sorted with
/// lexicographic tie-break, reserved tokens first.
pub fn build_vocab<S: AsRef<str>>(texts: &[S]) -> Result<Vocab> {
    if texts.is_empty() {
        return Err(Error::contract("build_vocab: empty text collection"));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in t.as_ref().split_whitespace() {
            *freq.entry(w.to_lowercase()).or_insert(0) += 1;
        }
    }
    let reserved = [PAD, UNK, END_ANSWER, ANSWER_WORD];
    for r in reserved {
        freq.remove(r);
    }
    let mut entries: Vec<(String, usize)> = freq.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut words: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
    words.extend(entries.into_iter().map(|(w, _)| w));
    Ok(Vocab::from_words(words))
}

/// Vocabulary for a corpus: utterances, schema words, lexicon values and
/// the QA template words. Deterministic for a given corpus.
pub fn corpus_vocab(corpus: &Corpus) -> Result<Vocab> {
    let mut texts: Vec<String> = Vec::new();
    for d in &corpus.dialogues {
        for t in &d.turns {
            texts.push(t.system.clone());
            texts.push(t.user.clone());
        }
    }
    for (domain, slots) in &corpus.schema.domains {
        texts.push(domain.clone());
        for s in slots {
            texts.push(s.clone());
        }
    }
    for values in corpus.schema.lexicon.values() {
        for v in values {
            texts.push(v.clone());
        }
    }
    texts.push(TEMPLATE_WORDS.join(" "));
    build_vocab(&texts)
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Which domains exist, which one is held out, and how slots map to
/// value families.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaSpec {
    /// domain -> list of (slot name, family name)
    pub domains: BTreeMap<String, Vec<(String, String)>>,
    pub held_out: String,
    pub lexicon: BTreeMap<String, Vec<String>>,
}

impl SchemaSpec {
    /// The shipped 6-domain schema: five train domains plus a held-out
    /// flight domain whose slots all come from shared families.
    pub fn default_spec() -> Self {
        let fam = |s: &str| s.to_string();
        let mut domains = BTreeMap::new();
        let slot = |name: &str, family: &str| (name.to_string(), family.to_string());
        domains.insert(
            "hotel".to_string(),
            vec![
                slot("area", "area"),
                slot("price", "price"),
                slot("name", "name"),
                slot("day", "day"),
                slot("people", "people"),
                slot("parking", "parking"),
                slot("stars", "stars"),
            ],
        );
        domains.insert(
            "restaurant".to_string(),
            vec![
                slot("area", "area"),
                slot("price", "price"),
                slot("name", "name"),
                slot("day", "day"),
                slot("time", "time"),
                slot("people", "people"),
                slot("food", "food"),
            ],
        );
        domains.insert(
            "attraction".to_string(),
            vec![slot("area", "area"), slot("name", "name"), slot("price", "price")],
        );
        domains.insert(
            "taxi".to_string(),
            vec![
                slot("area", "area"),
                slot("time", "time"),
                slot("day", "day"),
                slot("people", "people"),
            ],
        );
        domains.insert(
            "train".to_string(),
            vec![
                slot("day", "day"),
                slot("time", "time"),
                slot("people", "people"),
                slot("price", "price"),
                slot("departure", "departure"),
            ],
        );
        domains.insert(
            "flight".to_string(),
            vec![
                slot("area", "area"),
                slot("price", "price"),
                slot("day", "day"),
                slot("time", "time"),
                slot("people", "people"),
            ],
        );

        let mut lexicon = BTreeMap::new();
        lexicon.insert(fam("area"), svec(&["centre", "north", "south", "east", "west"]));
        lexicon.insert(fam("price"), svec(&["cheap", "moderate", "expensive"]));
        lexicon.insert(
            fam("day"),
            svec(&["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]),
        );
        lexicon.insert(fam("time"), svec(&["morning", "noon", "afternoon", "evening", "night"]));
        lexicon.insert(
            fam("people"),
            svec(&["one", "two", "three", "four", "five", "six", "seven", "eight"]),
        );
        lexicon.insert(
            fam("name"),
            svec(&["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "india"]),
        );
        lexicon.insert(fam("parking"), svec(&["yes", "no"]));
        lexicon.insert(fam("stars"), svec(&["two", "three", "four", "five"]));
        lexicon.insert(
            fam("food"),
            svec(&["indian", "chinese", "italian", "british", "french"]),
        );
        lexicon.insert(fam("departure"), svec(&["kings", "parkside", "riverside"]));

        SchemaSpec {
            domains,
            held_out: "flight".to_string(),
            lexicon,
        }
    }

    pub fn family_of(&self, slot: &SlotId) -> Option<&str> {
        self.domains
            .get(&slot.domain)?
            .iter()
            .find(|(name, _)| *name == slot.slot)
            .map(|(_, fam)| fam.as_str())
    }

    pub fn to_schema(&self) -> Schema {
        Schema {
            domains: self
                .domains
                .iter()
                .map(|(d, slots)| (d.clone(), slots.iter().map(|(n, _)| n.clone()).collect()))
                .collect(),
            lexicon: self.lexicon.clone(),
        }
    }
}

fn svec(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// User utterance for a new triple. Every template keeps the value next
/// to a family cue word so labels are recoverable by template inversion.
pub fn user_template(family: &str, domain: &str, value: &str) -> String {
    match family {
        "area" => format!("i want a {domain} in the {value} area"),
        "price" => format!("i need a {domain} in the {value} price range"),
        "day" => format!("the {domain} day should be {value}"),
        "time" => format!("the {domain} time should be {value}"),
        "people" => format!("the {domain} is for {value} people"),
        "name" => format!("the {domain} name is {value}"),
        "parking" => format!("the {domain} parking should be {value}"),
        "stars" => format!("the {domain} stars should be {value}"),
        "food" => format!("i want the {domain} food to be {value}"),
        "departure" => format!("the {domain} departure is {value}"),
        _ => format!("the {domain} {family} should be {value}"),
    }
}

/// Single-turn, unannotated sentences covering every domain, slot and
/// lexicon value. They give a language model lexical exposure to the
/// whole schema — the way a real pretrained model already knows every
/// domain word — without carrying any state supervision: the turns have
/// empty states and the dialogues claim no domains.
pub fn lexicon_dialogues(schema: &Schema) -> Vec<Dialogue> {
    let mut out = Vec::new();
    for (domain, slots) in &schema.domains {
        for slot in slots {
            let Some(values) = schema.lexicon.get(slot) else {
                continue;
            };
            for value in values {
                out.push(Dialogue {
                    id: format!("lex-{domain}-{slot}-{value}"),
                    domains: Vec::new(),
                    turns: vec![Turn {
                        system: "hello how can i help you ?".into(),
                        user: user_template(slot, domain, value),
                        state: Vec::new(),
                    }],
                });
            }
        }
    }
    out
}

/// System confirmation for the triples the user gave last turn.
fn system_confirmation(new_triples: &[StateTriple]) -> String {
    let mut parts: Vec<String> = Vec::new();
    for t in new_triples {
        parts.push(format!("the {} {} is {}", t.domain, t.slot, t.value));
    }
    format!("ok {} . anything else ?", parts.join(" and "))
}

/// Generate a seeded synthetic corpus.
///
/// Returns the schema, train dialogues (train domains only) and test
/// dialogues (each involving the held-out domain).
pub fn generate_synthetic(
    seed: u64,
    n_dialogues: usize,
    spec: &SchemaSpec,
) -> Result<(Schema, Vec<Dialogue>, Vec<Dialogue>)> {
    if n_dialogues == 0 {
        return Err(Error::contract("generate_synthetic: n_dialogues must be >= 1"));
    }
    let train_domains: Vec<&String> = spec
        .domains
        .keys()
        .filter(|d| **d != spec.held_out)
        .collect();
    if train_domains.len() < 5 {
        return Err(Error::contract(
            "generate_synthetic: need at least 5 train domains",
        ));
    }
    if !spec.domains.contains_key(&spec.held_out) {
        return Err(Error::contract(format!(
            "generate_synthetic: held-out domain {:?} not in schema",
            spec.held_out
        )));
    }
    // zero-shot premise: the held-out domain must share a family with training
    let train_families: BTreeSet<&str> = train_domains
        .iter()
        .flat_map(|d| spec.domains[*d].iter().map(|(_, f)| f.as_str()))
        .collect();
    let shares = spec.domains[&spec.held_out]
        .iter()
        .any(|(_, f)| train_families.contains(f.as_str()));
    if !shares {
        return Err(Error::contract(
            "generate_synthetic: held-out domain shares no slot family with train domains",
        ));
    }

    let mut rng = substream(seed, "corpus");
    let mut train = Vec::with_capacity(n_dialogues);
    for i in 0..n_dialogues {
        let domain = train_domains[rng.gen_range(0..train_domains.len())].clone();
        train.push(generate_dialogue(&mut rng, spec, &format!("train-{i:04}"), &domain));
    }
    let n_test = (n_dialogues / 4).max(4);
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let domain = spec.held_out.clone();
        test.push(generate_dialogue(&mut rng, spec, &format!("test-{i:04}"), &domain));
    }
    Ok((spec.to_schema(), train, test))
}

fn generate_dialogue(
    rng: &mut impl Rng,
    spec: &SchemaSpec,
    id: &str,
    domain: &str,
) -> Dialogue {
    let slots = &spec.domains[domain];
    let n_turns = rng.gen_range(2..=3);
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.shuffle(rng);

    let mut turns: Vec<Turn> = Vec::with_capacity(n_turns);
    let mut state: Vec<StateTriple> = Vec::new();
    let mut cursor = 0usize;
    for t in 0..n_turns {
        let n_new = rng.gen_range(1..=2).min(order.len().saturating_sub(cursor));
        let mut new_triples = Vec::new();
        let mut user_parts = Vec::new();
        for _ in 0..n_new.max(if t == 0 { 1 } else { 0 }) {
            if cursor >= order.len() {
                break;
            }
            let (slot_name, family) = &slots[order[cursor]];
            cursor += 1;
            let values = &spec.lexicon[family];
            let value = values[rng.gen_range(0..values.len())].clone();
            user_parts.push(user_template(family, domain, &value));
            new_triples.push(StateTriple {
                domain: domain.to_string(),
                slot: slot_name.clone(),
                value,
            });
        }
        // the system confirms everything the user added in the previous turn
        let system = if t == 0 {
            "hello how can i help you ?".to_string()
        } else {
            let prev_len = if t >= 2 { turns[t - 2].state.len() } else { 0 };
            let confirmed = &turns[t - 1].state[prev_len..];
            if confirmed.is_empty() {
                "ok . anything else ?".to_string()
            } else {
                system_confirmation(confirmed)
            }
        };
        state.extend(new_triples.clone());
        let user = if user_parts.is_empty() {
            "that is all thank you".to_string()
        } else {
            user_parts.join(" and ")
        };
        turns.push(Turn {
            system,
            user,
            state: state.clone(),
        });
    }

    Dialogue {
        id: id.to_string(),
        domains: vec![domain.to_string()],
        turns,
    }
}
