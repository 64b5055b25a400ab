//! Strict micro-averaged scoring and the IE / MR / LDR error strata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityMention, Sentence};

/// Relations whose argument distance exceeds this are long-distance.
pub const LONG_DISTANCE: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence `{0}` appears in the predictions but not in the gold corpus")]
    UnknownId(String),
    #[error("gold sentence `{0}` has no prediction")]
    MissingPrediction(String),
    #[error("duplicate sentence id `{0}`")]
    DuplicateId(String),
    #[error("empty corpus")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        *self = Self::from_counts(self.tp + tp, self.fp + fp, self.fn_ + fn_);
    }
}

pub type EntityKey = (usize, usize, String);
pub type RelationKey = (EntityKey, EntityKey, String);

fn ekey(e: &EntityMention) -> EntityKey {
    (e.start, e.end, e.etype.clone())
}

pub fn entity_keys(s: &Sentence) -> BTreeSet<EntityKey> {
    s.entities.iter().map(ekey).collect()
}

/// Relations keyed by type and both full argument entities; symmetric types
/// are ordered by span start.
pub fn relation_keys(s: &Sentence, symmetric: &BTreeSet<String>) -> BTreeSet<RelationKey> {
    s.canonical(symmetric)
        .1
        .into_iter()
        .map(|(a, b, t)| (ekey(&a), ekey(&b), t))
        .collect()
}

/// Token gap between the closest boundaries of two spans.
pub fn argument_distance(a: &EntityKey, b: &EntityKey) -> usize {
    if a.1 < b.0 {
        b.0 - a.1
    } else {
        a.0.saturating_sub(b.1)
    }
}

pub fn is_long_distance(r: &RelationKey) -> bool {
    argument_distance(&r.0, &r.1) > LONG_DISTANCE
}

/// Entities that take part in no relation.
pub fn isolated_entities(s: &Sentence) -> BTreeSet<EntityKey> {
    let linked: BTreeSet<usize> = s.relations.iter().flat_map(|r| [r.arg1, r.arg2]).collect();
    s.entities
        .iter()
        .enumerate()
        .filter(|(i, _)| !linked.contains(i))
        .map(|(_, e)| ekey(e))
        .collect()
}

pub fn is_multi_relation(s: &Sentence) -> bool {
    s.relations.len() >= 2
}

fn align<'a>(pred: &'a [Sentence], gold: &'a [Sentence]) -> Result<Vec<(&'a Sentence, &'a Sentence)>, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_id: HashMap<&str, &Sentence> = HashMap::with_capacity(pred.len());
    for p in pred {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(gold.len());
    for g in gold {
        if !seen.insert(g.id.as_str()) {
            return Err(EvalError::DuplicateId(g.id.clone()));
        }
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(g.id.clone()))?;
        out.push((*p, g));
    }
    if let Some(p) = pred.iter().find(|p| !seen.contains(p.id.as_str())) {
        return Err(EvalError::UnknownId(p.id.clone()));
    }
    Ok(out)
}

fn counts<K: Ord>(pred: &BTreeSet<K>, gold: &BTreeSet<K>) -> (usize, usize, usize) {
    let tp = pred.intersection(gold).count();
    (tp, pred.len() - tp, gold.len() - tp)
}

pub fn score_entities(pred: &[Sentence], gold: &[Sentence]) -> Result<Prf, EvalError> {
    let mut prf = Prf::default();
    for (p, g) in align(pred, gold)? {
        let (tp, fp, fn_) = counts(&entity_keys(p), &entity_keys(g));
        prf.add(tp, fp, fn_);
    }
    Ok(prf)
}

pub fn score_relations(pred: &[Sentence], gold: &[Sentence], symmetric: &BTreeSet<String>) -> Result<Prf, EvalError> {
    let mut prf = Prf::default();
    for (p, g) in align(pred, gold)? {
        let (tp, fp, fn_) = counts(&relation_keys(p, symmetric), &relation_keys(g, symmetric));
        prf.add(tp, fp, fn_);
    }
    Ok(prf)
}

/// Counts restricted to a stratum. Gold membership comes from `gold_in`. A
/// prediction matching a gold item inherits that item's membership; an
/// unmatched prediction is classified by `pred_in`.
fn stratum_counts<K: Ord>(
    pred: &BTreeSet<K>,
    gold: &BTreeSet<K>,
    gold_in: impl Fn(&K) -> bool,
    pred_in: impl Fn(&K) -> bool,
) -> (usize, usize, usize, usize) {
    let gold_s: BTreeSet<&K> = gold.iter().filter(|k| gold_in(k)).collect();
    let pred_s: BTreeSet<&K> = pred
        .iter()
        .filter(|k| if gold.contains(k) { gold_in(k) } else { pred_in(k) })
        .collect();
    let tp = pred_s.intersection(&gold_s).count();
    (tp, pred_s.len() - tp, gold_s.len() - tp, gold_s.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Strata {
    /// Entity scores on isolated entities; `None` when the gold stratum is empty.
    pub ie: Option<Prf>,
    /// Relation scores on multi-relation sentences.
    pub mr: Option<Prf>,
    /// Relation scores on long-distance relations.
    pub ldr: Option<Prf>,
}

pub fn stratified_eval(pred: &[Sentence], gold: &[Sentence], symmetric: &BTreeSet<String>) -> Result<Strata, EvalError> {
    let (mut ie, mut mr, mut ldr) = (Prf::default(), Prf::default(), Prf::default());
    let (mut ie_n, mut mr_n, mut ldr_n) = (0, 0, 0);
    for (p, g) in align(pred, gold)? {
        let (gi, pi) = (isolated_entities(g), isolated_entities(p));
        let (tp, fp, fn_, size) = stratum_counts(&entity_keys(p), &entity_keys(g), |k| gi.contains(k), |k| pi.contains(k));
        ie.add(tp, fp, fn_);
        ie_n += size;

        let (pr, gr) = (relation_keys(p, symmetric), relation_keys(g, symmetric));
        let multi = is_multi_relation(g);
        let (tp, fp, fn_, size) = stratum_counts(&pr, &gr, |_| multi, |_| multi);
        mr.add(tp, fp, fn_);
        mr_n += size;

        let (tp, fp, fn_, size) = stratum_counts(&pr, &gr, is_long_distance, is_long_distance);
        ldr.add(tp, fp, fn_);
        ldr_n += size;
    }
    let keep = |prf: Prf, size: usize| (size > 0).then_some(prf);
    Ok(Strata {
        ie: keep(ie, ie_n),
        mr: keep(mr, mr_n),
        ldr: keep(ldr, ldr_n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub entity: Prf,
    pub relation: Prf,
    pub entity_by_type: BTreeMap<String, Prf>,
    pub relation_by_type: BTreeMap<String, Prf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub strata: Option<Strata>,
}

impl EvalReport {
    /// Mean of entity and relation F1, the model-selection criterion.
    pub fn average_f1(&self) -> f64 {
        (self.entity.f1 + self.relation.f1) / 2.0
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, p: &Prf| {
            let _ = writeln!(
                s,
                "{name:<24} P={:.4} R={:.4} F1={:.4} (tp={} fp={} fn={})",
                p.precision, p.recall, p.f1, p.tp, p.fp, p.fn_
            );
        };
        let _ = writeln!(s, "sentences: {}", self.sentences);
        line(&mut s, "entity", &self.entity);
        line(&mut s, "relation", &self.relation);
        for (t, p) in &self.entity_by_type {
            line(&mut s, &format!("  entity/{t}"), p);
        }
        for (t, p) in &self.relation_by_type {
            line(&mut s, &format!("  relation/{t}"), p);
        }
        if let Some(st) = &self.strata {
            for (name, p) in [("IE (entity)", &st.ie), ("MR (relation)", &st.mr), ("LDR (relation)", &st.ldr)] {
                match p {
                    Some(p) => line(&mut s, name, p),
                    None => {
                        let _ = writeln!(s, "{name:<24} n/a");
                    }
                }
            }
        }
        s
    }
}

fn by_type<K: Ord + Clone>(
    pairs: &[(&Sentence, &Sentence)],
    keys: impl Fn(&Sentence) -> BTreeSet<K>,
    type_of: impl Fn(&K) -> &str,
) -> BTreeMap<String, Prf> {
    let mut out: BTreeMap<String, Prf> = BTreeMap::new();
    for (p, g) in pairs {
        let (pk, gk) = (keys(p), keys(g));
        let types: BTreeSet<&str> = pk.iter().chain(&gk).map(&type_of).collect();
        for t in types {
            let filt = |set: &BTreeSet<K>| -> BTreeSet<K> { set.iter().filter(|k| type_of(k) == t).cloned().collect() };
            let (tp, fp, fn_) = counts(&filt(&pk), &filt(&gk));
            out.entry(t.to_string()).or_default().add(tp, fp, fn_);
        }
    }
    out
}

pub fn evaluate(
    pred: &[Sentence],
    gold: &[Sentence],
    symmetric: &BTreeSet<String>,
    with_strata: bool,
) -> Result<EvalReport, EvalError> {
    let pairs = align(pred, gold)?;
    Ok(EvalReport {
        sentences: gold.len(),
        entity: score_entities(pred, gold)?,
        relation: score_relations(pred, gold, symmetric)?,
        entity_by_type: by_type(&pairs, entity_keys, |k| k.2.as_str()),
        relation_by_type: by_type(&pairs, |s| relation_keys(s, symmetric), |k| k.2.as_str()),
        strata: if with_strata {
            Some(stratified_eval(pred, gold, symmetric)?)
        } else {
            None
        },
    })
}
