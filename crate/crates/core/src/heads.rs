//! Unified label head and the training objectives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BinaryTable, GoldTable};
use crate::graph::GraphStrategy;
use crate::nn::{NnError, ParamId, ParameterStore, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gold label {label} out of range for {size} classes")]
    LabelRange { label: usize, size: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Cellwise affine map from `G` to unified-label logits.
#[derive(Debug, Clone)]
pub struct LabelHead {
    pub w: ParamId,
    pub b: ParamId,
    pub labels: usize,
}

impl LabelHead {
    /// Zero-initialised: every cell starts uniform over the label space.
    pub fn new<T: Scalar>(input: usize, labels: usize, store: &mut ParameterStore<T>) -> Result<Self, NnError> {
        Ok(Self {
            w: store.register_zeros("label_head.w", &[input, labels])?,
            b: store.register_zeros("label_head.b", &[labels])?,
            labels,
        })
    }

    /// `G: [n, n, g]` to logits `[n * n, |Y|]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, g: Var) -> Result<Var, NnError> {
        let s = tape.shape(g).to_vec();
        if s.len() != 3 || s[0] != s[1] {
            return Err(NnError::Shape(format!("label head expects [n, n, g], got {s:?}")));
        }
        let flat = tape.reshape(g, &[s[0] * s[0], s[2]])?;
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(flat, w, Some(b))
    }
}

/// Per-cell distributions over the unified label space, row-major cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    pub n: usize,
    pub labels: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

impl ProbTable {
    pub fn from_logits(n: usize, labels: usize, logits: Vec<f64>) -> Result<Self, HeadsError> {
        if labels == 0 || logits.len() != n * n * labels {
            return Err(HeadsError::Shape(format!(
                "{} logits for n = {n}, |Y| = {labels}",
                logits.len()
            )));
        }
        let probs = softmax_rows(&logits, labels);
        Ok(Self {
            n,
            labels,
            logits,
            probs,
        })
    }

    /// Table whose cells put all mass on the given labels.
    pub fn one_hot(gold: &GoldTable, labels: usize) -> Self {
        let mut probs = vec![0.0; gold.labels.len() * labels];
        for (c, &l) in gold.labels.iter().enumerate() {
            probs[c * labels + l] = 1.0;
        }
        let logits = probs.iter().map(|&p| if p > 0.0 { 0.0 } else { f64::NEG_INFINITY }).collect();
        Self {
            n: gold.n,
            labels,
            logits,
            probs,
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = i * self.n + j;
        &self.probs[c * self.labels..(c + 1) * self.labels]
    }

    /// Most probable label per cell, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.chunks(self.labels).map(argmax_lowest).collect()
    }
}

/// Index of the maximum, first one on ties.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_mask(mask: Option<&[bool]>, cells: usize) -> Result<(), HeadsError> {
    match mask {
        Some(m) if m.len() != cells => Err(HeadsError::Shape(format!(
            "mask of {} cells for {cells}",
            m.len()
        ))),
        _ => Ok(()),
    }
}

fn mean_nll(
    probs: &[f64],
    k: usize,
    targets: impl Iterator<Item = usize>,
    mask: Option<&[bool]>,
) -> Result<(f64, usize), HeadsError> {
    let mut total = 0.0;
    let mut count = 0;
    for (c, t) in targets.enumerate() {
        if t >= k {
            return Err(HeadsError::LabelRange { label: t, size: k });
        }
        if mask.is_none_or(|m| m[c]) {
            total -= probs[c * k + t].ln();
            count += 1;
        }
    }
    Ok((if count == 0 { 0.0 } else { total / count as f64 }, count))
}

/// Mean negative log-likelihood of gold labels over unmasked cells.
pub fn loss_entry(probs: &ProbTable, gold: &GoldTable, mask: Option<&[bool]>) -> Result<f64, HeadsError> {
    if gold.n != probs.n {
        return Err(HeadsError::Shape(format!("gold n = {}, probs n = {}", gold.n, probs.n)));
    }
    check_mask(mask, gold.labels.len())?;
    Ok(mean_nll(&probs.probs, probs.labels, gold.labels.iter().copied(), mask)?.0)
}

/// Mean negative log-likelihood of gold bits from `[n * n, 2]` logits.
pub fn loss_bin(logits: &[f64], gold: &BinaryTable, mask: Option<&[bool]>) -> Result<f64, HeadsError> {
    if logits.len() != 2 * gold.bits.len() {
        return Err(HeadsError::Shape(format!(
            "{} binary logits for {} cells",
            logits.len(),
            gold.bits.len()
        )));
    }
    check_mask(mask, gold.bits.len())?;
    let probs = softmax_rows(logits, 2);
    Ok(mean_nll(&probs, 2, gold.bits.iter().map(|&b| b as usize), mask)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub entry: f64,
    pub bin: f64,
    pub total: f64,
    pub cells: usize,
}

/// `entry` alone under the static strategy, `entry + bin` under the dynamic one.
pub fn total_loss(entry: f64, bin: f64, strategy: GraphStrategy) -> f64 {
    match strategy {
        GraphStrategy::Static => entry,
        GraphStrategy::Dynamic => entry + bin,
    }
}

impl LossReport {
    pub fn new(entry: f64, bin: f64, strategy: GraphStrategy, cells: usize) -> Self {
        let bin = match strategy {
            GraphStrategy::Static => 0.0,
            GraphStrategy::Dynamic => bin,
        };
        Self {
            entry,
            bin,
            total: total_loss(entry, bin, strategy),
            cells,
        }
    }
}
