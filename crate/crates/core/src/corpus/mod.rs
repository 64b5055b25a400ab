//! Sentences, the unified label space and gold table construction.

pub mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{gen_synthetic, RelationRule, SyntheticConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error(
        "sentence `{id}`: cell ({row}, {col}) claimed by both {first} and {second}"
    )]
    CellConflict {
        id: String,
        row: usize,
        col: usize,
        first: String,
        second: String,
    },
    #[error("unknown {kind} type `{name}`")]
    UnknownLabel { kind: &'static str, name: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
}

impl EntityMention {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        Self {
            start,
            end,
            etype: etype.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationMention {
    /// Index into the sentence's entity list.
    pub arg1: usize,
    pub arg2: usize,
    #[serde(rename = "type")]
    pub rtype: String,
}

impl RelationMention {
    pub fn new(arg1: usize, arg2: usize, rtype: impl Into<String>) -> Self {
        Self {
            arg1,
            arg2,
            rtype: rtype.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub relations: Vec<RelationMention>,
}

/// Relation keyed by argument spans rather than entity indices.
pub type SpanRelation = (EntityMention, EntityMention, String);

impl Sentence {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        let n = self.n();
        if n == 0 {
            return Err(invalid("sentence has no tokens".into()));
        }
        for e in &self.entities {
            if e.start > e.end || e.end >= n {
                return Err(invalid(format!(
                    "entity span ({}, {}) out of range for {n} tokens",
                    e.start, e.end
                )));
            }
        }
        for (a, ea) in self.entities.iter().enumerate() {
            for eb in &self.entities[a + 1..] {
                if ea.overlaps(eb) {
                    return Err(invalid(format!(
                        "overlapping or nested entity spans ({}, {}) and ({}, {})",
                        ea.start, ea.end, eb.start, eb.end
                    )));
                }
            }
        }
        for r in &self.relations {
            let k = self.entities.len();
            if r.arg1 >= k || r.arg2 >= k {
                return Err(invalid(format!(
                    "relation `{}` references missing entity ({}, {}) of {k}",
                    r.rtype, r.arg1, r.arg2
                )));
            }
            if r.arg1 == r.arg2 {
                return Err(invalid(format!(
                    "relation `{}` links entity {} to itself",
                    r.rtype, r.arg1
                )));
            }
        }
        Ok(())
    }

    pub fn relation_spans(&self) -> Vec<SpanRelation> {
        self.relations
            .iter()
            .map(|r| {
                (
                    self.entities[r.arg1].clone(),
                    self.entities[r.arg2].clone(),
                    r.rtype.clone(),
                )
            })
            .collect()
    }

    /// Order-free view of the annotations: sorted entities and relations keyed by
    /// spans, with symmetric relation types put in left-to-right argument order.
    pub fn canonical(&self, symmetric: &BTreeSet<String>) -> (Vec<EntityMention>, Vec<SpanRelation>) {
        let ents: BTreeSet<EntityMention> = self.entities.iter().cloned().collect();
        let rels: BTreeSet<SpanRelation> = self
            .relation_spans()
            .into_iter()
            .map(|(a, b, t)| {
                if symmetric.contains(&t) && b.start < a.start {
                    (b, a, t)
                } else {
                    (a, b, t)
                }
            })
            .collect();
        (ents.into_iter().collect(), rels.into_iter().collect())
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<Sentence>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: Sentence = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn corpus_to_string(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&serde_json::to_string(s).expect("sentence serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: &Path, sentences: &[Sentence]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(corpus_to_string(sentences).as_bytes()).map_err(io)
}

/// Unified label space: `⊥` at 0, then entity types, then relation types,
/// each group in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
    #[serde(default)]
    symmetric_relation_types: BTreeSet<String>,
}

pub const NULL_LABEL: usize = 0;

impl LabelSpace {
    pub fn new(
        entity_types: impl IntoIterator<Item = String>,
        relation_types: impl IntoIterator<Item = String>,
    ) -> Self {
        let e: BTreeSet<String> = entity_types.into_iter().collect();
        let r: BTreeSet<String> = relation_types.into_iter().collect();
        Self {
            entity_types: e.into_iter().collect(),
            relation_types: r.into_iter().collect(),
            symmetric_relation_types: BTreeSet::new(),
        }
    }

    /// Marks relation types whose gold rectangles are mirrored across the diagonal.
    pub fn with_symmetric<I, S>(mut self, types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.symmetric_relation_types = types.into_iter().map(Into::into).collect();
        self
    }

    pub fn len(&self) -> usize {
        1 + self.entity_types.len() + self.relation_types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn symmetric(&self) -> &BTreeSet<String> {
        &self.symmetric_relation_types
    }

    pub fn is_symmetric(&self, rtype: &str) -> bool {
        self.symmetric_relation_types.contains(rtype)
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entity_types
            .binary_search_by(|t| t.as_str().cmp(name))
            .ok()
            .map(|i| 1 + i)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_types
            .binary_search_by(|t| t.as_str().cmp(name))
            .ok()
            .map(|i| 1 + self.entity_types.len() + i)
    }

    pub fn is_entity_label(&self, idx: usize) -> bool {
        idx >= 1 && idx <= self.entity_types.len()
    }

    pub fn is_relation_label(&self, idx: usize) -> bool {
        idx > self.entity_types.len() && idx < self.len()
    }

    /// Unified indices of `⊥` followed by all entity labels.
    pub fn entity_candidates(&self) -> Vec<usize> {
        (0..=self.entity_types.len()).collect()
    }

    /// Unified indices of `⊥` followed by all relation labels.
    pub fn relation_candidates(&self) -> Vec<usize> {
        std::iter::once(NULL_LABEL)
            .chain(1 + self.entity_types.len()..self.len())
            .collect()
    }

    pub fn name(&self, idx: usize) -> &str {
        if idx == NULL_LABEL {
            "⊥"
        } else if self.is_entity_label(idx) {
            &self.entity_types[idx - 1]
        } else {
            &self.relation_types[idx - 1 - self.entity_types.len()]
        }
    }

    /// Checks that every type used by `s` is known.
    pub fn check(&self, s: &Sentence) -> Result<(), CorpusError> {
        for e in &s.entities {
            if self.entity_index(&e.etype).is_none() {
                return Err(CorpusError::UnknownLabel {
                    kind: "entity",
                    name: e.etype.clone(),
                });
            }
        }
        for r in &s.relations {
            if self.relation_index(&r.rtype).is_none() {
                return Err(CorpusError::UnknownLabel {
                    kind: "relation",
                    name: r.rtype.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn build_label_space(corpus: &[Sentence]) -> LabelSpace {
    LabelSpace::new(
        corpus
            .iter()
            .flat_map(|s| s.entities.iter().map(|e| e.etype.clone())),
        corpus
            .iter()
            .flat_map(|s| s.relations.iter().map(|r| r.rtype.clone())),
    )
}

/// `n x n` matrix of unified label indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTable {
    pub n: usize,
    pub labels: Vec<usize>,
}

impl GoldTable {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            labels: vec![NULL_LABEL; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.n + j]
    }

    pub fn null_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NULL_LABEL).count()
    }

    /// Inverts the filling rules: entity squares on the diagonal, then relation
    /// rectangles between recovered entities.
    pub fn read_back(&self, ls: &LabelSpace) -> (Vec<EntityMention>, Vec<SpanRelation>) {
        let n = self.n;
        let mut entities = Vec::new();
        let mut i = 0;
        while i < n {
            let lab = self.get(i, i);
            if !ls.is_entity_label(lab) {
                i += 1;
                continue;
            }
            let mut end = i;
            while end + 1 < n
                && self.get(end + 1, end + 1) == lab
                && self.get(i, end + 1) == lab
                && self.get(end + 1, i) == lab
            {
                end += 1;
            }
            entities.push(EntityMention::new(i, end, ls.name(lab)));
            i = end + 1;
        }
        let mut relations = Vec::new();
        for (a, ea) in entities.iter().enumerate() {
            for (b, eb) in entities.iter().enumerate() {
                if a == b {
                    continue;
                }
                let lab = self.get(ea.start, eb.start);
                if !ls.is_relation_label(lab) {
                    continue;
                }
                let name = ls.name(lab);
                if ls.is_symmetric(name) && b < a && self.get(eb.start, ea.start) == lab {
                    continue;
                }
                relations.push((ea.clone(), eb.clone(), name.to_string()));
            }
        }
        relations.sort();
        (entities, relations)
    }
}

/// Fills entity squares and relation rectangles; everything else stays `⊥`.
pub fn gold_table(s: &Sentence, ls: &LabelSpace) -> Result<GoldTable, CorpusError> {
    ls.check(s)?;
    let n = s.n();
    let mut table = GoldTable::empty(n);
    let mut source: HashMap<usize, String> = HashMap::new();
    let mut fill = |i: usize, j: usize, label: usize, what: String| -> Result<(), CorpusError> {
        let cell = i * n + j;
        let current = table.labels[cell];
        if current != NULL_LABEL && current != label {
            return Err(CorpusError::CellConflict {
                id: s.id.clone(),
                row: i,
                col: j,
                first: source.get(&cell).cloned().unwrap_or_default(),
                second: what,
            });
        }
        table.labels[cell] = label;
        source.entry(cell).or_insert(what);
        Ok(())
    };
    for (k, e) in s.entities.iter().enumerate() {
        let label = ls.entity_index(&e.etype).expect("checked");
        for i in e.start..=e.end {
            for j in e.start..=e.end {
                fill(i, j, label, format!("entity #{k} `{}`", e.etype))?;
            }
        }
    }
    for (k, r) in s.relations.iter().enumerate() {
        let label = ls.relation_index(&r.rtype).expect("checked");
        let (e1, e2) = (&s.entities[r.arg1], &s.entities[r.arg2]);
        let what = format!("relation #{k} `{}`", r.rtype);
        for i in e1.start..=e1.end {
            for j in e2.start..=e2.end {
                fill(i, j, label, what.clone())?;
                if ls.is_symmetric(&r.rtype) {
                    fill(j, i, label, what.clone())?;
                }
            }
        }
    }
    Ok(table)
}

/// Indicator of non-`⊥` cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryTable {
    pub n: usize,
    pub bits: Vec<u8>,
}

impl BinaryTable {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.n + j]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

pub fn gold_binary_table(g: &GoldTable) -> BinaryTable {
    BinaryTable {
        n: g.n,
        bits: g.labels.iter().map(|&l| u8::from(l != NULL_LABEL)).collect(),
    }
}
