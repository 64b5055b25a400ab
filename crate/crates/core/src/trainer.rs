//! AdamW optimisation, early stopping and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, LabelSpace, Sentence};
use crate::encoder::{load_precomputed, DropoutCtx, Vocab};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{Model, ModelConfig, ModelError, ModelInput, Targets};
use crate::nn::archive::{load_into_store, read_manifest, save_store, FORMAT_VERSION};
use crate::nn::{flush_denormals, DType, NnError, ParamGrads, ParameterStore, Scalar, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}, sentence `{id}`: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        id: String,
        source: Box<ModelError>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// End training once dev entity and relation F1 are both 1.
    pub stop_at_perfect: bool,
    pub seed: u64,
    pub dtype: DType,
    /// Sequential per-sentence execution.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            max_epochs: 300,
            patience: 100,
            stop_at_perfect: true,
            seed: 13,
            dtype: DType::F32,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay < 0.0 {
            return bad("lr must be > 0 and weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let zeros = |(_, p): (&str, &crate::nn::TensorValue<T>)| vec![T::zero(); p.value.len()];
        Self {
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One AdamW update. Decay multiplies weights by `1 - lr * wd`; missing
/// gradients count as zero. Frozen parameters are left alone.
pub fn adamw_step<T: Scalar>(store: &mut ParameterStore<T>, grads: &ParamGrads<T>, state: &mut AdamState<T>, h: &AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let f = T::from_f64_lossy;
    let (b1, b2, lr, eps) = (f(h.beta1), f(h.beta2), f(h.lr), f(h.eps));
    let decay = f(1.0 - h.lr * h.weight_decay);
    let (c1, c2) = (f(c1), f(c2));
    for (idx, (_, p)) in store.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let g = grads.get(idx);
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(T::zero(), |g| g[k]);
            *w *= decay;
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Metadata stored next to checkpoint parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub labels: LabelSpace,
    pub vocab: Vocab,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &Model, store: &ParameterStore<T>, threshold: f64, epoch: Option<usize>) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.cfg.clone(),
        labels: model.labels.clone(),
        vocab: model.vocab.clone(),
        threshold: Some(threshold),
        epoch,
    };
    let value = serde_json::to_value(&meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    save_store(dir, store, value)?;
    Ok(())
}

/// Rebuilds the model from the manifest and loads its parameters.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model, ParameterStore<T>, CheckpointMeta), TrainError> {
    let manifest = read_manifest(dir)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.metadata).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let (model, mut store) = Model::new::<T>(&meta.model, meta.labels.clone(), meta.vocab.clone(), 0)?;
    load_into_store(dir, &mut store)?;
    Ok((model, store, meta))
}

/// Like [`load_checkpoint`] but rejects a checkpoint built for other labels.
pub fn load_checkpoint_for<T: Scalar>(
    dir: &Path,
    labels: &LabelSpace,
) -> Result<(Model, ParameterStore<T>, CheckpointMeta), TrainError> {
    let out = load_checkpoint(dir)?;
    if &out.2.labels != labels {
        return Err(TrainError::Checkpoint("label space differs from the checkpoint's".into()));
    }
    Ok(out)
}

/// A prepared training or evaluation example.
pub struct Example<T> {
    pub sentence: Sentence,
    pub input: ModelInput<T>,
    pub targets: Targets,
}

pub fn prepare<T: Scalar>(model: &Model, corpus: &[Sentence]) -> Result<Vec<Example<T>>, TrainError> {
    corpus
        .iter()
        .map(|s| {
            model.labels.check(s)?;
            Ok(Example {
                sentence: s.clone(),
                input: model.input_for(s),
                targets: Targets::new(s, &model.labels)?,
            })
        })
        .collect()
}

/// Like [`prepare`] but reads each sentence's encoder features from
/// `features_dir/<sentence id>`.
pub fn prepare_precomputed<T: Scalar>(
    model: &Model,
    corpus: &[Sentence],
    features_dir: &Path,
) -> Result<Vec<Example<T>>, TrainError> {
    let spec = model.precomputed_spec();
    corpus
        .iter()
        .map(|s| {
            model.labels.check(s)?;
            let dir = features_dir.join(&s.id);
            let (id, out) = load_precomputed::<T>(&dir, &spec).map_err(ModelError::from)?;
            if id != s.id || out.states.dim(0) != s.n() {
                return Err(ModelError::Input(format!(
                    "features in {} belong to `{id}` with {} tokens, expected `{}` with {}",
                    dir.display(),
                    out.states.dim(0),
                    s.id,
                    s.n()
                ))
                .into());
            }
            Ok(Example {
                sentence: s.clone(),
                input: ModelInput::Precomputed(out),
                targets: Targets::new(s, &model.labels)?,
            })
        })
        .collect()
}

pub fn predict_corpus<T: Scalar>(
    model: &Model,
    store: &ParameterStore<T>,
    examples: &[Example<T>],
    threshold: f64,
    parallel: bool,
) -> Result<Vec<Sentence>, TrainError> {
    let run = |ex: &Example<T>| -> Result<Sentence, TrainError> {
        let d = model.predict(store, &ex.input, threshold)?;
        Ok(d.to_sentence(&ex.sentence.id, &ex.sentence.tokens))
    };
    if parallel {
        examples.par_iter().map(run).collect()
    } else {
        examples.iter().map(run).collect()
    }
}

pub fn evaluate_examples<T: Scalar>(
    model: &Model,
    store: &ParameterStore<T>,
    examples: &[Example<T>],
    threshold: f64,
    parallel: bool,
    strata: bool,
) -> Result<EvalReport, TrainError> {
    let pred = predict_corpus(model, store, examples, threshold, parallel)?;
    let gold: Vec<Sentence> = examples.iter().map(|e| e.sentence.clone()).collect();
    Ok(evaluate(&pred, &gold, model.labels.symmetric(), strata)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_entry: f64,
    pub loss_bin: f64,
    pub loss_total: f64,
    pub dev_entity: crate::eval::Prf,
    pub dev_relation: crate::eval::Prf,
    pub dev_average_f1: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub wall_clock_s: f64,
    pub sentences_per_s: f64,
}

pub struct TrainOutcome<T> {
    pub store: ParameterStore<T>,
    pub history: Vec<EpochRecord>,
    pub timing: Vec<TimingRecord>,
    pub best_epoch: usize,
    pub best_average_f1: f64,
}

struct StepResult<T> {
    grads: ParamGrads<T>,
    entry: f64,
    bin: f64,
    total: f64,
}

fn sentence_step<T: Scalar>(
    model: &Model,
    store: &ParameterStore<T>,
    ex: &Example<T>,
    seed: u64,
    scale: T,
) -> Result<StepResult<T>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new(store);
    let ctx = DropoutCtx {
        rate: model.cfg.encoder.dropout,
        rng: &mut rng,
    };
    let out = model.forward(&mut tape, &ex.input, Some(&ex.targets), Some(ctx))?;
    let loss = out.loss.expect("targets were given");
    let val = |v: Option<crate::nn::Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let (entry, bin, total) = (val(out.entry_loss), val(out.bin_loss), val(Some(loss)));
    let grads = tape.backward_scaled(loss, scale)?.into_params();
    Ok(StepResult {
        grads,
        entry,
        bin,
        total,
    })
}

fn snapshot<T: Scalar>(store: &ParameterStore<T>) -> Vec<crate::nn::Tensor<T>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore<T: Scalar>(store: &mut ParameterStore<T>, snap: Vec<crate::nn::Tensor<T>>) {
    for ((_, p), v) in store.iter_mut().zip(snap) {
        p.value = v;
    }
}

/// Trains `store` in place and returns the best-on-dev parameters.
///
/// Per-sentence work may run on the rayon pool, but gradients are reduced in
/// batch order, so results do not depend on the thread count.
pub fn train<T: Scalar>(
    model: &Model,
    mut store: ParameterStore<T>,
    train_set: &[Example<T>],
    dev_set: &[Example<T>],
    cfg: &TrainConfig,
    threshold: f64,
    mut on_epoch: impl FnMut(&EpochRecord, &TimingRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainError::Config("train and dev sets must be non-empty".into()));
    }
    let hyper = AdamHyper::from(cfg);
    let mut adam = AdamState::new(&store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_0de5);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut timing = Vec::new();
    let mut best: Option<(f64, usize, Vec<crate::nn::Tensor<T>>)> = None;
    let parallel = !cfg.deterministic;
    flush_denormals();
    if parallel {
        rayon::broadcast(|_| flush_denormals());
    }

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut se, mut sb, mut st) = (0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
            let seed_of = |i: usize| cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((epoch as u64) << 32) ^ i as u64;
            let step = |&i: &usize| {
                sentence_step(model, &store, &train_set[i], seed_of(i), scale).map_err(|source| TrainError::Step {
                    epoch,
                    batch: batch_idx,
                    id: train_set[i].sentence.id.clone(),
                    source: Box::new(source),
                })
            };
            let results: Vec<StepResult<T>> = if parallel {
                batch.par_iter().map(step).collect::<Result<_, _>>()?
            } else {
                batch.iter().map(step).collect::<Result<_, _>>()?
            };
            let mut grads = ParamGrads::with_len(store.len());
            for r in &results {
                if !r.total.is_finite() {
                    return Err(TrainError::Divergence { epoch, batch: batch_idx });
                }
                grads.merge(&r.grads);
                se += r.entry;
                sb += r.bin;
                st += r.total;
            }
            adamw_step(&mut store, &grads, &mut adam, &hyper);
        }
        let count = train_set.len() as f64;
        let report = evaluate_examples(model, &store, dev_set, threshold, parallel, false)?;
        let avg = report.average_f1();
        let improved = best.as_ref().is_none_or(|(b, _, _)| avg > *b);
        if improved {
            best = Some((avg, epoch, snapshot(&store)));
        }
        let record = EpochRecord {
            epoch,
            loss_entry: se / count,
            loss_bin: sb / count,
            loss_total: st / count,
            dev_entity: report.entity,
            dev_relation: report.relation,
            dev_average_f1: avg,
            best: improved,
        };
        let secs = started.elapsed().as_secs_f64();
        let t = TimingRecord {
            epoch,
            wall_clock_s: secs,
            sentences_per_s: count / secs.max(1e-9),
        };
        on_epoch(&record, &t);
        history.push(record);
        timing.push(t);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.stop_at_perfect && report.entity.f1 == 1.0 && report.relation.f1 == 1.0 {
            break;
        }
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_average_f1, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(&mut store, snap);
    Ok(TrainOutcome {
        store,
        history,
        timing,
        best_epoch,
        best_average_f1,
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}
