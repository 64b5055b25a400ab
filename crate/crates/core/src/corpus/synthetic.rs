use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, EntityMention, RelationMention, Sentence};

/// A relation type licensed between a head entity type and the nearest
/// following entity of the tail type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRule {
    pub name: String,
    pub head: String,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub max_entity_len: usize,
    pub entity_types: Vec<String>,
    pub relations: Vec<RelationRule>,
    /// Probability of keeping each rule-licensed relation.
    pub relation_prob: f64,
    pub filler_vocab: usize,
    pub entity_vocab: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 12,
            min_entities: 1,
            max_entities: 4,
            max_entity_len: 2,
            entity_types: vec!["LOC".into(), "ORG".into(), "PER".into()],
            relations: vec![
                RelationRule {
                    name: "LIVE-IN".into(),
                    head: "PER".into(),
                    tail: "LOC".into(),
                },
                RelationRule {
                    name: "WORK-FOR".into(),
                    head: "PER".into(),
                    tail: "ORG".into(),
                },
            ],
            relation_prob: 1.0,
            filler_vocab: 40,
            entity_vocab: 12,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.min_entities > self.max_entities {
            return bad("min_entities > max_entities");
        }
        if self.max_entity_len == 0 {
            return bad("max_entity_len must be >= 1");
        }
        if self.min_entities > self.min_len {
            return bad("min_entities cannot fit in min_len tokens");
        }
        if self.max_entities > 0 && self.entity_types.is_empty() {
            return bad("entities requested but no entity types given");
        }
        if !(0.0..=1.0).contains(&self.relation_prob) {
            return bad("relation_prob must lie in [0, 1]");
        }
        if self.filler_vocab == 0 || self.entity_vocab == 0 {
            return bad("vocabularies must be non-empty");
        }
        for (i, r) in self.relations.iter().enumerate() {
            if self.relations[..i]
                .iter()
                .any(|o| o.head == r.head && o.tail == r.tail)
            {
                return bad("two relation rules share a (head, tail) type pair");
            }
            if !self.entity_types.contains(&r.head) || !self.entity_types.contains(&r.tail) {
                return bad(&format!("relation `{}` uses an unknown entity type", r.name));
            }
        }
        Ok(())
    }
}

/// Deterministic corpus of flat, conflict-free annotated sentences.
pub fn gen_synthetic(seed: u64, count: usize, cfg: &SyntheticConfig) -> Result<Vec<Sentence>, CorpusError> {
    cfg.validate()?;
    if count == 0 {
        return Err(CorpusError::Config("count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|k| one_sentence(&mut rng, k, cfg)).collect()
}

fn one_sentence(rng: &mut ChaCha8Rng, k: usize, cfg: &SyntheticConfig) -> Result<Sentence, CorpusError> {
    let n = rng.gen_range(cfg.min_len..=cfg.max_len);
    let mut n_ent = rng.gen_range(cfg.min_entities..=cfg.max_entities);
    let mut lengths: Vec<usize> = (0..n_ent)
        .map(|_| rng.gen_range(1..=cfg.max_entity_len))
        .collect();
    while lengths.iter().sum::<usize>() > n {
        // shrink the longest span first, then drop entities
        match lengths.iter_mut().max() {
            Some(l) if *l > 1 => *l -= 1,
            _ => {
                lengths.pop();
                n_ent -= 1;
            }
        }
    }
    let filler = n - lengths.iter().sum::<usize>();
    // stars and bars: split `filler` tokens into n_ent + 1 gaps
    let mut cuts: Vec<usize> = (0..n_ent).map(|_| rng.gen_range(0..=filler)).collect();
    cuts.sort_unstable();
    let mut entities = Vec::with_capacity(n_ent);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lengths.iter().zip(&cuts) {
        pos += cut - prev_cut;
        prev_cut = *cut;
        let etype = cfg.entity_types.choose(rng).expect("non-empty").clone();
        entities.push(EntityMention::new(pos, pos + len - 1, etype));
        pos += len;
    }

    let mut tokens: Vec<String> = (0..n)
        .map(|_| format!("w{}", rng.gen_range(0..cfg.filler_vocab)))
        .collect();
    for e in &entities {
        let prefix = e.etype.to_lowercase();
        for tok in tokens.iter_mut().take(e.end + 1).skip(e.start) {
            *tok = format!("{prefix}{}", rng.gen_range(0..cfg.entity_vocab));
        }
    }

    let mut relations = Vec::new();
    for (a, head) in entities.iter().enumerate() {
        for rule in cfg.relations.iter().filter(|r| r.head == head.etype) {
            let target = entities
                .iter()
                .enumerate()
                .skip(a + 1)
                .find(|(_, e)| e.etype == rule.tail)
                .map(|(b, _)| b);
            if let Some(b) = target {
                if rng.gen_bool(cfg.relation_prob) {
                    relations.push(RelationMention::new(a, b, rule.name.clone()));
                }
            }
        }
    }
    let s = Sentence {
        id: format!("syn-{k:05}"),
        tokens,
        entities,
        relations,
    };
    s.validate()?;
    Ok(s)
}
