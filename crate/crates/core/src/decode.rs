//! Table decoding: spans, then entity labels, then relation labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityMention, LabelSpace, RelationMention, Sentence, NULL_LABEL};
use crate::heads::ProbTable;

pub const DEFAULT_THRESHOLD: f64 = 1.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DecodedResult {
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationMention>,
    /// Mean probability of the chosen label, aligned with `entities`.
    pub entity_scores: Vec<f64>,
    /// Aligned with `relations`.
    pub relation_scores: Vec<f64>,
}

impl DecodedResult {
    pub fn to_sentence(&self, id: &str, tokens: &[String]) -> Sentence {
        Sentence {
            id: id.to_string(),
            tokens: tokens.to_vec(),
            entities: self.entities.clone(),
            relations: self.relations.clone(),
        }
    }
}

fn euclid(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average of the row-view and column-view distances between positions `t`
/// and `t + 1`, for every `t < n - 1`.
pub fn adjacent_distances(probs: &ProbTable) -> Vec<f64> {
    let n = probs.n;
    (0..n.saturating_sub(1))
        .map(|t| {
            let row = |r: usize| (0..n).flat_map(move |j| probs.cell(r, j).iter().copied());
            let col = |c: usize| (0..n).flat_map(move |i| probs.cell(i, c).iter().copied());
            (euclid(row(t), row(t + 1)) + euclid(col(t), col(t + 1))) / 2.0
        })
        .collect()
}

/// Maximal segments between split points, as inclusive `(start, end)` pairs.
pub fn split_spans(probs: &ProbTable, threshold: f64) -> Vec<(usize, usize)> {
    spans_from_distances(probs.n, &adjacent_distances(probs), threshold)
}

pub fn spans_from_distances(n: usize, distances: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for (t, &d) in distances.iter().enumerate() {
        if d > threshold {
            spans.push((start, t));
            start = t + 1;
        }
    }
    spans.push((start, n - 1));
    spans
}

fn block_mean(probs: &ProbTable, rows: (usize, usize), cols: (usize, usize)) -> Vec<f64> {
    let mut acc = vec![0.0; probs.labels];
    for i in rows.0..=rows.1 {
        for j in cols.0..=cols.1 {
            for (a, &p) in acc.iter_mut().zip(probs.cell(i, j)) {
                *a += p;
            }
        }
    }
    let count = ((rows.1 - rows.0 + 1) * (cols.1 - cols.0 + 1)) as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

/// Best label among `⊥` and `candidates` (ascending); lowest index wins ties.
fn pick(mean: &[f64], candidates: &[usize]) -> (usize, f64) {
    let mut best = (NULL_LABEL, mean[NULL_LABEL]);
    for &c in candidates {
        if mean[c] > best.1 {
            best = (c, mean[c]);
        }
    }
    best
}

pub fn decode_entities(probs: &ProbTable, spans: &[(usize, usize)], ls: &LabelSpace) -> (Vec<EntityMention>, Vec<f64>) {
    let candidates = ls.entity_candidates();
    let mut entities = Vec::new();
    let mut scores = Vec::new();
    for &span in spans {
        let (label, score) = pick(&block_mean(probs, span, span), &candidates);
        if label != NULL_LABEL {
            entities.push(EntityMention::new(span.0, span.1, ls.name(label)));
            scores.push(score);
        }
    }
    (entities, scores)
}

pub fn decode_relations(
    probs: &ProbTable,
    entities: &[EntityMention],
    ls: &LabelSpace,
) -> (Vec<RelationMention>, Vec<f64>) {
    let candidates = ls.relation_candidates();
    let mut found: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut scored: Vec<((usize, usize, usize), f64)> = Vec::new();
    for (a, e1) in entities.iter().enumerate() {
        for (b, e2) in entities.iter().enumerate() {
            if a == b {
                continue;
            }
            let (label, score) = pick(&block_mean(probs, (e1.start, e1.end), (e2.start, e2.end)), &candidates);
            if label == NULL_LABEL {
                continue;
            }
            let key = if ls.is_symmetric(ls.name(label)) {
                (a.min(b), a.max(b), label)
            } else {
                (a, b, label)
            };
            if found.insert(key) {
                scored.push((key, score));
            } else if let Some(slot) = scored.iter_mut().find(|(k, _)| *k == key) {
                slot.1 = slot.1.max(score);
            }
        }
    }
    scored.sort_by_key(|x| x.0);
    scored
        .into_iter()
        .map(|((a, b, l), s)| (RelationMention::new(a, b, ls.name(l)), s))
        .unzip()
}

pub fn decode(probs: &ProbTable, threshold: f64, ls: &LabelSpace) -> DecodedResult {
    let spans = split_spans(probs, threshold);
    let (entities, entity_scores) = decode_entities(probs, &spans, ls);
    let (relations, relation_scores) = decode_relations(probs, &entities, ls);
    DecodedResult {
        entities,
        relations,
        entity_scores,
        relation_scores,
    }
}
