//! Metrics and analyses: slot accuracy, joint goal accuracy, error
//! taxonomy, average cosine similarity of slot features, similarity
//! matrices, rank correlation, and the cluster-count sweep pipeline.

use crate::backbone::BackboneParams;
use crate::corpus::{Corpus, Dialogue, SlotId, Vocab, NONE_VALUE};
use crate::decode::{predict_slot, Prediction};
use crate::error::{Error, Result};
use crate::experts::{init_pool, ExpertPool};
use crate::routing::{
    assign_nearest, cluster_slots, featurize, random_assignment, ClusterModel, FeatureMode,
    SlotFeature,
};
use crate::train::{examples_for_slots, sample_fraction, train_expert};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Exact-match comparison key: lowercase, whitespace-normalized.
pub fn normalize_value(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    /// reference has a value, model said "none"
    pub partial: usize,
    /// reference is "none", model produced a value
    pub over: usize,
    /// both sides have values and they differ
    pub other: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.partial + self.over + self.other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub sa_with_none: f64,
    pub sa_without_none: f64,
    /// no non-"none" references existed; SA-without-none is vacuous
    pub sa_without_none_vacuous: bool,
    pub jga: f64,
    pub errors: ErrorCounts,
    pub turns: usize,
    pub slot_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain: BTreeMap<String, DomainMetrics>,
    pub overall: DomainMetrics,
}

struct Cell {
    predicted: String,
    reference: String,
}

type Grid = BTreeMap<(String, String, usize), BTreeMap<String, Cell>>;

/// Group predictions into (domain, dialogue, turn) cells and check the
/// grid is complete: every turn of a domain covers the same slot set.
fn build_grid(preds: &[Prediction], slots_per_domain: &BTreeMap<String, BTreeSet<String>>) -> Result<Grid> {
    let mut grid: Grid = BTreeMap::new();
    for p in preds {
        let key = (p.domain.clone(), p.dialogue_id.clone(), p.turn);
        let cell = grid.entry(key).or_default();
        if cell
            .insert(
                p.slot.clone(),
                Cell {
                    predicted: normalize_value(&p.predicted),
                    reference: normalize_value(&p.reference),
                },
            )
            .is_some()
        {
            return Err(Error::contract(format!(
                "duplicate prediction for {} turn {} slot {:?}",
                p.dialogue_id, p.turn, p.slot
            )));
        }
    }
    for ((domain, dialogue, turn), cell) in &grid {
        let expected = slots_per_domain.get(domain).ok_or_else(|| {
            Error::contract(format!("predictions for unknown domain {domain:?}"))
        })?;
        let got: BTreeSet<String> = cell.keys().cloned().collect();
        if &got != expected {
            return Err(Error::contract(format!(
                "incomplete grid for {dialogue} turn {turn}: got {got:?}, expected {expected:?}"
            )));
        }
    }
    Ok(grid)
}

fn metrics_of(cells: &[(&BTreeMap<String, Cell>, ())]) -> DomainMetrics {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut correct_nn = 0usize;
    let mut total_nn = 0usize;
    let mut turns_correct = 0usize;
    let mut errors = ErrorCounts::default();
    for (cell, ()) in cells {
        let mut all_ok = true;
        for c in cell.values() {
            total += 1;
            let ok = c.predicted == c.reference;
            if ok {
                correct += 1;
            } else {
                all_ok = false;
                match (c.reference.as_str(), c.predicted.as_str()) {
                    (r, NONE_VALUE) if r != NONE_VALUE => errors.partial += 1,
                    (NONE_VALUE, p) if p != NONE_VALUE => errors.over += 1,
                    _ => errors.other += 1,
                }
            }
            if c.reference != NONE_VALUE {
                total_nn += 1;
                if ok {
                    correct_nn += 1;
                }
            }
        }
        if all_ok {
            turns_correct += 1;
        }
    }
    let turns = cells.len();
    let vacuous = total_nn == 0;
    DomainMetrics {
        sa_with_none: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        sa_without_none: if vacuous { 1.0 } else { correct_nn as f64 / total_nn as f64 },
        sa_without_none_vacuous: vacuous,
        jga: if turns == 0 { 1.0 } else { turns_correct as f64 / turns as f64 },
        errors,
        turns,
        slot_pairs: total,
    }
}

/// Score a complete prediction grid.
pub fn evaluate(
    preds: &[Prediction],
    slots_per_domain: &BTreeMap<String, BTreeSet<String>>,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::contract("evaluate: no predictions"));
    }
    let grid = build_grid(preds, slots_per_domain)?;
    let mut per_domain = BTreeMap::new();
    for domain in grid.keys().map(|(d, _, _)| d.clone()).collect::<BTreeSet<_>>() {
        let cells: Vec<(&BTreeMap<String, Cell>, ())> = grid
            .iter()
            .filter(|((d, _, _), _)| d == &domain)
            .map(|(_, c)| (c, ()))
            .collect();
        per_domain.insert(domain, metrics_of(&cells));
    }
    let all: Vec<(&BTreeMap<String, Cell>, ())> = grid.values().map(|c| (c, ())).collect();
    let overall = metrics_of(&all);
    Ok(EvalReport {
        per_domain,
        overall,
    })
}

/// Cosine similarity; zero-norm vectors compare as 0 with a flag.
pub fn cosine(a: &[f32], b: &[f32]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcsEntry {
    pub domain: String,
    pub k: usize,
    pub mode: FeatureMode,
    pub train_acs: f64,
    pub test_acs: f64,
    pub jga: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcsReport {
    pub entries: Vec<AcsEntry>,
    /// Spearman rank correlation of test ACS vs JGA across K, when
    /// defined.
    pub spearman_test_acs_jga: Option<f64>,
}

/// Mean within-cluster cosine of train-slot pairs (pooled across
/// clusters), and mean cosine of each test slot against the train slots
/// of its assigned cluster.
pub fn average_cosine_similarity(
    train_features: &[SlotFeature],
    model: &ClusterModel,
    test_features: &[SlotFeature],
) -> Result<(f64, f64)> {
    let mut by_cluster: BTreeMap<usize, Vec<&SlotFeature>> = BTreeMap::new();
    for f in train_features {
        let c = *model
            .assignments
            .get(&f.slot.text())
            .ok_or_else(|| Error::contract(format!("slot {:?} not in cluster model", f.slot.text())))?;
        by_cluster.entry(c).or_default().push(f);
    }

    let mut train_sum = 0.0;
    let mut train_n = 0usize;
    for members in by_cluster.values() {
        // clusters with fewer than two train slots contribute no pairs
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                train_sum += cosine(&members[i].vector, &members[j].vector).0;
                train_n += 1;
            }
        }
    }
    let train_acs = if train_n == 0 { 1.0 } else { train_sum / train_n as f64 };

    let mut test_sum = 0.0;
    let mut test_n = 0usize;
    for f in test_features {
        let c = assign_nearest(model, f)?;
        for m in by_cluster.get(&c).into_iter().flatten() {
            test_sum += cosine(&f.vector, &m.vector).0;
            test_n += 1;
        }
    }
    let test_acs = if test_n == 0 { 1.0 } else { test_sum / test_n as f64 };
    Ok((train_acs, test_acs))
}

/// Full pairwise cosine matrix. Returns slot names, the matrix, and
/// whether any zero-norm feature was flagged.
pub fn similarity_matrix(features: &[SlotFeature]) -> Result<(Vec<String>, Vec<Vec<f64>>, bool)> {
    if features.is_empty() {
        return Err(Error::contract("similarity_matrix: no features"));
    }
    let names: Vec<String> = features.iter().map(|f| f.slot.text()).collect();
    let mut flagged = false;
    let n = features.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let (c, flag) = cosine(&features[i].vector, &features[j].vector);
            flagged |= flag;
            matrix[i][j] = c;
            matrix[j][i] = c;
        }
    }
    Ok((names, matrix, flagged))
}

/// CSV with a slot-name header row and column.
pub fn matrix_csv(names: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("slot");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(matrix) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // average rank for ties, 1-based
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; None when fewer than two points or either
/// side has zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// Bar chart of the three error classes as standalone SVG.
pub fn taxonomy_bars_svg(errors: &ErrorCounts) -> String {
    let bars = [
        ("partial", errors.partial, "#4878a8"),
        ("over", errors.over, "#b0563c"),
        ("other", errors.other, "#6a9a58"),
    ];
    let max = bars.iter().map(|(_, v, _)| *v).max().unwrap_or(0).max(1);
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"320\" height=\"220\" \
         viewBox=\"0 0 320 220\">\n",
    );
    for (i, (label, value, color)) in bars.iter().enumerate() {
        let h = 160.0 * *value as f64 / max as f64;
        let x = 40 + i * 90;
        let y = 180.0 - h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y:.1}\" width=\"60\" height=\"{h:.1}\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"198\" text-anchor=\"middle\" font-size=\"12\">{label}</text>\n",
            x + 30
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{value}</text>\n",
            x + 30,
            y - 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Similarity heatmap as standalone SVG; cell shade tracks cosine in
/// [-1, 1].
pub fn heatmap_svg(names: &[String], matrix: &[Vec<f64>]) -> String {
    let n = names.len();
    let cell = 18usize;
    let margin = 110usize;
    let size = margin + n * cell + 10;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
            let color = format!("#{shade:02x}{shade:02x}ff");
            let x = margin + j * cell;
            let y = margin + i * cell;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{color}\">\
                 <title>{} / {}: {v:.4}</title></rect>\n",
                names[i], names[j]
            ));
        }
    }
    for (i, name) in names.iter().enumerate() {
        let y = margin + i * cell + cell / 2 + 4;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\" font-size=\"10\">{name}</text>\n",
            margin - 6
        ));
        let x = margin + i * cell + cell / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"start\" font-size=\"10\" \
             transform=\"rotate(-60 {x} {})\">{name}</text>\n",
            margin - 6,
            margin - 6
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// How test slots pick their expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// nearest centroid of the slot feature
    Specialized,
    /// seeded uniform choice per slot (ablation)
    Random,
    /// expert 0 for everything (no routing)
    Single,
}

impl std::str::FromStr for Routing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specialized" => Ok(Routing::Specialized),
            "random" => Ok(Routing::Random),
            "single" => Ok(Routing::Single),
            other => Err(Error::validation(format!("unknown routing {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// fraction of training dialogues kept
    pub fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 3,
            lr: crate::train::EXPERT_LR,
            batch: crate::train::BATCH_SIZE,
            fraction: 1.0,
        }
    }
}

/// Train one expert per cluster on the train-domain dialogues.
pub fn train_pool(
    params: &BackboneParams,
    vocab: &Vocab,
    corpus: &Corpus,
    clusters: &ClusterModel,
    held_out: &str,
    seed: u64,
    settings: &TrainSettings,
) -> Result<ExpertPool> {
    let mut pool = init_pool(&params.config, clusters, seed);
    let mut train_dialogues: Vec<Dialogue> = corpus
        .dialogues
        .iter()
        .filter(|d| !d.domains.iter().any(|x| x == held_out))
        .cloned()
        .collect();
    if settings.fraction < 1.0 {
        sample_fraction(&mut train_dialogues, settings.fraction, seed)?;
    }
    for k in 0..clusters.k {
        let slots: Vec<SlotId> = clusters
            .assignments
            .iter()
            .filter(|(_, &c)| c == k)
            .map(|(text, _)| SlotId::parse(text))
            .collect::<Result<_>>()?;
        let examples =
            examples_for_slots(vocab, params.config.max_context, &train_dialogues, &slots)?;
        let report = train_expert(
            params,
            &mut pool.experts[k],
            &examples,
            seed,
            settings.epochs,
            settings.lr,
            settings.batch,
        )?;
        pool.losses.push(report.epoch_losses);
    }
    Ok(pool)
}

/// Expert index per slot of `domain` under the given routing rule.
pub fn route_slots(
    params: &BackboneParams,
    vocab: &Vocab,
    clusters: &ClusterModel,
    slots: &[SlotId],
    routing: Routing,
) -> Result<BTreeMap<String, usize>> {
    match routing {
        Routing::Single => Ok(slots.iter().map(|s| (s.text(), 0)).collect()),
        Routing::Random => {
            let all = random_assignment(clusters, clusters.seed);
            let mut rng = crate::rng::substream(clusters.seed, "random-assign");
            use rand::Rng;
            // train slots reuse the pooled draw; unseen slots draw next
            let mut out = BTreeMap::new();
            for s in slots {
                let key = s.text();
                let idx = all
                    .get(&key)
                    .copied()
                    .unwrap_or_else(|| rng.gen_range(0..clusters.k));
                out.insert(key, idx);
            }
            Ok(out)
        }
        Routing::Specialized => {
            let mut out = BTreeMap::new();
            for s in slots {
                if let Some(&c) = clusters.assignments.get(&s.text()) {
                    out.insert(s.text(), c);
                } else {
                    let f = featurize(params, vocab, s, clusters.mode)?;
                    out.insert(s.text(), assign_nearest(clusters, &f)?);
                }
            }
            Ok(out)
        }
    }
}

/// Score one domain of the test dialogues: every turn of every dialogue
/// mentioning the domain, over all its schema slots.
pub fn evaluate_domain(
    params: &BackboneParams,
    vocab: &Vocab,
    pool: Option<&ExpertPool>,
    clusters: Option<&ClusterModel>,
    routing: Routing,
    test_dialogues: &[Dialogue],
    domain: &str,
    corpus: &Corpus,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let slots = corpus.schema.slots_of(domain)?;
    let assignment = match (pool, clusters) {
        (Some(_), Some(model)) => route_slots(params, vocab, model, &slots, routing)?,
        (None, _) => BTreeMap::new(),
        (Some(_), None) => {
            return Err(Error::contract("expert pool given without a cluster model"))
        }
    };
    let mut preds = Vec::new();
    for d in test_dialogues.iter().filter(|d| d.domains.iter().any(|x| x == domain)) {
        for t in 0..d.turns.len() {
            for slot in &slots {
                let expert = match pool {
                    Some(pool) => Some(pool.expert(assignment[&slot.text()])?),
                    None => None,
                };
                preds.push(predict_slot(params, vocab, expert, d, t, slot)?);
            }
        }
    }
    let mut grid_slots = BTreeMap::new();
    grid_slots.insert(
        domain.to_string(),
        slots.iter().map(|s| s.slot.clone()).collect::<BTreeSet<_>>(),
    );
    let report = evaluate(&preds, &grid_slots)?;
    Ok((report, preds))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mode: FeatureMode,
    pub domain: String,
    pub train_acs: f64,
    pub test_acs: f64,
    pub jga: f64,
    pub sa_with_none: f64,
    pub sa_without_none: f64,
}

/// Full pipeline per K: cluster, train experts, evaluate the held-out
/// domain, and report ACS alongside JGA.
#[allow(clippy::too_many_arguments)]
pub fn sweep_clusters(
    params: &BackboneParams,
    vocab: &Vocab,
    corpus: &Corpus,
    test_dialogues: &[Dialogue],
    held_out: &str,
    ks: &[usize],
    mode: FeatureMode,
    seed: u64,
    settings: &TrainSettings,
) -> Result<Vec<SweepRow>> {
    let train_slots = corpus.schema.train_slots(held_out);
    let test_slots = corpus.schema.slots_of(held_out)?;
    let train_features: Vec<SlotFeature> = train_slots
        .iter()
        .map(|s| featurize(params, vocab, s, mode))
        .collect::<Result<_>>()?;
    let test_features: Vec<SlotFeature> = test_slots
        .iter()
        .map(|s| featurize(params, vocab, s, mode))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &k in ks {
        let clusters = cluster_slots(params, vocab, &corpus.schema, held_out, mode, k, seed)?;
        let pool = train_pool(params, vocab, corpus, &clusters, held_out, seed, settings)?;
        let (report, _) = evaluate_domain(
            params,
            vocab,
            Some(&pool),
            Some(&clusters),
            Routing::Specialized,
            test_dialogues,
            held_out,
            corpus,
        )?;
        let (train_acs, test_acs) =
            average_cosine_similarity(&train_features, &clusters, &test_features)?;
        let m = &report.per_domain[held_out];
        rows.push(SweepRow {
            k,
            mode,
            domain: held_out.to_string(),
            train_acs,
            test_acs,
            jga: m.jga,
            sa_with_none: m.sa_with_none,
            sa_without_none: m.sa_without_none,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,mode,domain,train_acs,test_acs,jga,sa_with_none,sa_without_none\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.k, r.mode, r.domain, r.train_acs, r.test_acs, r.jga, r.sa_with_none, r.sa_without_none
        ));
    }
    out
}

pub fn acs_report(rows: &[SweepRow]) -> AcsReport {
    let entries: Vec<AcsEntry> = rows
        .iter()
        .map(|r| AcsEntry {
            domain: r.domain.clone(),
            k: r.k,
            mode: r.mode,
            train_acs: r.train_acs,
            test_acs: r.test_acs,
            jga: r.jga,
        })
        .collect();
    let xs: Vec<f64> = entries.iter().map(|e| e.test_acs).collect();
    let ys: Vec<f64> = entries.iter().map(|e| e.jga).collect();
    AcsReport {
        spearman_test_acs_jga: spearman(&xs, &ys),
        entries,
    }
}
