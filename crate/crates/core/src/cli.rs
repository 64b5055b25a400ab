//! Subcommands behind the `hiore` binary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::check::{gradcheck_all, PipelineCheck, VariantReport};
use crate::config::{ConfigError, DecodeConfig, RunConfig};
use crate::corpus::synthetic::{gen_synthetic, SyntheticConfig};
use crate::corpus::{load_corpus, save_corpus, CorpusError, LabelSpace, Sentence};
use crate::decode::{decode, DEFAULT_THRESHOLD};
use crate::encoder::Vocab;
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::graph::{dynamic_graph, static_graph, CellGraph};
use crate::heads::ProbTable;
use crate::model::{InputMode, Model, ModelConfig, ModelError};
use crate::nn::archive::read_manifest;
use crate::nn::{DType, NnError, ParameterStore, Scalar, Tape};
use crate::trainer::{
    load_checkpoint, prepare, prepare_precomputed, save_checkpoint, train, write_jsonl, Example, TrainConfig,
    TrainError,
};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{key}: {source}")]
    Corpus { key: String, source: CorpusError },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error("gradient check failed: max relative error {worst:.3e} exceeds {tolerance:.1e}")]
    Tolerance { worst: f64, tolerance: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a corpus; errors name the config key or flag it came from.
pub fn load_split(key: &str, path: &Path) -> Result<Vec<Sentence>, CliError> {
    load_corpus(path).map_err(|source| CliError::Corpus {
        key: key.to_string(),
        source,
    })
}

/// Label space over every given split, with the configured symmetric types.
pub fn label_space(splits: &[&[Sentence]], symmetric: &[String]) -> LabelSpace {
    let all = splits.iter().flat_map(|s| s.iter());
    let (mut ents, mut rels) = (BTreeSet::new(), BTreeSet::new());
    for s in all {
        ents.extend(s.entities.iter().map(|e| e.etype.clone()));
        rels.extend(s.relations.iter().map(|r| r.rtype.clone()));
    }
    LabelSpace::new(ents, rels).with_symmetric(symmetric.iter().cloned())
}

fn examples<T: Scalar>(model: &Model, corpus: &[Sentence], features: Option<&Path>) -> Result<Vec<Example<T>>, CliError> {
    match (model.cfg.input, features) {
        (InputMode::Tokens, None) => Ok(prepare(model, corpus)?),
        (InputMode::Precomputed, Some(dir)) => Ok(prepare_precomputed(model, corpus, dir)?),
        (InputMode::Tokens, Some(_)) => Err(CliError::Input(
            "data.features_dir is set but model.input is `tokens`".into(),
        )),
        (InputMode::Precomputed, None) => Err(CliError::Input(
            "model.input is `precomputed` but data.features_dir is not set".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_average_f1: f64,
    pub dev: EvalReport,
    pub test: Option<EvalReport>,
}

/// Trains from an in-memory config. When `out_dir` is given the checkpoint,
/// metrics, timing and resolved config are written there.
pub fn run_training(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainSummary, CliError> {
    let train_set = load_split("data.train", &cfg.data.train)?;
    let dev_set = load_split("data.dev", &cfg.data.dev)?;
    let test_set = match &cfg.data.test {
        Some(p) => Some(load_split("data.test", p)?),
        None => None,
    };
    match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(cfg, &train_set, &dev_set, test_set.as_deref(), out_dir),
        DType::F64 => train_typed::<f64>(cfg, &train_set, &dev_set, test_set.as_deref(), out_dir),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    train_set: &[Sentence],
    dev_set: &[Sentence],
    test_set: Option<&[Sentence]>,
    out_dir: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    let mut splits = vec![train_set, dev_set];
    splits.extend(test_set);
    let labels = label_space(&splits, &cfg.data.symmetric_relation_types);
    let vocab = Vocab::build(train_set.iter().flat_map(|s| &s.tokens));
    let (model, store) = Model::new::<T>(&cfg.model, labels, vocab, cfg.train.seed)?;
    let features = cfg.data.features_dir.as_deref();
    let train_ex = examples::<T>(&model, train_set, features)?;
    let dev_ex = examples::<T>(&model, dev_set, features)?;
    let threshold = cfg.decode.threshold;
    let outcome = train(&model, store, &train_ex, &dev_ex, &cfg.train, threshold, |r, t| {
        log::info!(
            "epoch {:>3} loss {:.5} dev entity F1 {:.4} relation F1 {:.4} ({:.2}s, {:.1} sent/s)",
            r.epoch,
            r.loss_total,
            r.dev_entity.f1,
            r.dev_relation.f1,
            t.wall_clock_s,
            t.sentences_per_s
        );
    })?;
    let parallel = !cfg.train.deterministic;
    let dev = crate::trainer::evaluate_examples(&model, &outcome.store, &dev_ex, threshold, parallel, true)?;
    let test = match test_set {
        Some(t) => {
            let ex = examples::<T>(&model, t, features)?;
            Some(crate::trainer::evaluate_examples(&model, &outcome.store, &ex, threshold, parallel, true)?)
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_checkpoint(
            &dir.join(CHECKPOINT_DIR),
            &model,
            &outcome.store,
            threshold,
            Some(outcome.best_epoch),
        )?;
        write_jsonl(&dir.join(METRICS_FILE), &outcome.history)?;
        write_jsonl(&dir.join(TIMING_FILE), &outcome.timing)?;
        let snap = dir.join(CONFIG_SNAPSHOT);
        fs::write(&snap, cfg.to_toml()?).map_err(io_err(&snap))?;
    }
    Ok(TrainSummary {
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_average_f1: outcome.best_average_f1,
        dev,
        test,
    })
}

pub fn cmd_train(config: &Path, out_dir: &Path, deterministic: bool) -> Result<TrainSummary, CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.train.deterministic |= deterministic;
    run_training(&cfg, Some(out_dir))
}

/// Writes an untrained checkpoint for `config`.
pub fn cmd_init(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let train_set = load_split("data.train", &cfg.data.train)?;
    let labels = label_space(&[&train_set], &cfg.data.symmetric_relation_types);
    let vocab = Vocab::build(train_set.iter().flat_map(|s| &s.tokens));
    match cfg.train.dtype {
        DType::F32 => {
            let (model, store) = Model::new::<f32>(&cfg.model, labels, vocab, cfg.train.seed)?;
            save_checkpoint(out, &model, &store, cfg.decode.threshold, None)?;
        }
        DType::F64 => {
            let (model, store) = Model::new::<f64>(&cfg.model, labels, vocab, cfg.train.seed)?;
            save_checkpoint(out, &model, &store, cfg.decode.threshold, None)?;
        }
    }
    Ok(())
}

/// A checkpoint loaded at the precision it was saved in.
pub enum Loaded {
    F32(Model, ParameterStore<f32>, f64),
    F64(Model, ParameterStore<f64>, f64),
}

impl Loaded {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let dtype = read_manifest(dir)?.dtype;
        Ok(match dtype {
            DType::F32 => {
                let (m, s, meta) = load_checkpoint::<f32>(dir)?;
                Self::F32(m, s, meta.threshold.unwrap_or(DEFAULT_THRESHOLD))
            }
            DType::F64 => {
                let (m, s, meta) = load_checkpoint::<f64>(dir)?;
                Self::F64(m, s, meta.threshold.unwrap_or(DEFAULT_THRESHOLD))
            }
        })
    }

    pub fn model(&self) -> &Model {
        match self {
            Self::F32(m, ..) | Self::F64(m, ..) => m,
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Self::F32(.., t) | Self::F64(.., t) => *t,
        }
    }

    /// Label distributions for every sentence, in corpus order.
    pub fn probs(&self, corpus: &[Sentence], features: Option<&Path>) -> Result<Vec<ProbTable>, CliError> {
        fn run<T: Scalar>(
            m: &Model,
            s: &ParameterStore<T>,
            corpus: &[Sentence],
            features: Option<&Path>,
        ) -> Result<Vec<ProbTable>, CliError> {
            use rayon::prelude::*;
            let ex = examples::<T>(m, corpus, features)?;
            ex.par_iter().map(|e| Ok(m.predict_probs(s, &e.input)?)).collect()
        }
        match self {
            Self::F32(m, s, _) => run(m, s, corpus, features),
            Self::F64(m, s, _) => run(m, s, corpus, features),
        }
    }

    /// Cell graph the GNN uses for sentence `s`.
    pub fn graph_for(&self, s: &Sentence, features: Option<&Path>) -> Result<CellGraph, CliError> {
        fn run<T: Scalar>(
            m: &Model,
            st: &ParameterStore<T>,
            s: &Sentence,
            features: Option<&Path>,
        ) -> Result<CellGraph, CliError> {
            let ex = examples::<T>(m, std::slice::from_ref(s), features)?.remove(0);
            let mut tape = Tape::new(st);
            let out = m.forward(&mut tape, &ex.input, None, None)?;
            Ok(match out.predicted_bits {
                Some(bits) => dynamic_graph(&bits),
                None => static_graph(out.n),
            })
        }
        match self {
            Self::F32(m, st, _) => run(m, st, s, features),
            Self::F64(m, st, _) => run(m, st, s, features),
        }
    }
}

fn decode_all(loaded: &Loaded, probs: &[ProbTable], corpus: &[Sentence], threshold: f64) -> Vec<Sentence> {
    probs
        .iter()
        .zip(corpus)
        .map(|(p, s)| decode(p, threshold, &loaded.model().labels).to_sentence(&s.id, &s.tokens))
        .collect()
}

pub fn cmd_eval(
    checkpoint: &Path,
    corpus: &Path,
    strata: bool,
    threshold: Option<f64>,
    features: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let loaded = Loaded::open(checkpoint)?;
    let gold = load_split("--corpus", corpus)?;
    let probs = loaded.probs(&gold, features)?;
    let pred = decode_all(&loaded, &probs, &gold, threshold.unwrap_or(loaded.threshold()));
    Ok(evaluate(&pred, &gold, loaded.model().labels.symmetric(), strata)?)
}

/// One predicted sentence with per-mention confidence scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(flatten)]
    pub sentence: Sentence,
    pub entity_scores: Vec<f64>,
    pub relation_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub sentences: usize,
    pub seconds: f64,
    pub sentences_per_s: f64,
}

pub fn cmd_predict(
    checkpoint: &Path,
    corpus: &Path,
    out: &Path,
    threshold: Option<f64>,
    features: Option<&Path>,
) -> Result<PredictSummary, CliError> {
    let loaded = Loaded::open(checkpoint)?;
    let input = load_split("--corpus", corpus)?;
    let started = Instant::now();
    let probs = loaded.probs(&input, features)?;
    let threshold = threshold.unwrap_or(loaded.threshold());
    let records: Vec<PredictionRecord> = probs
        .iter()
        .zip(&input)
        .map(|(p, s)| {
            let d = decode(p, threshold, &loaded.model().labels);
            PredictionRecord {
                sentence: d.to_sentence(&s.id, &s.tokens),
                entity_scores: d.entity_scores,
                relation_scores: d.relation_scores,
            }
        })
        .collect();
    let seconds = started.elapsed().as_secs_f64();
    write_jsonl(out, &records)?;
    Ok(PredictSummary {
        sentences: input.len(),
        seconds,
        sentences_per_s: input.len() as f64 / seconds.max(1e-9),
    })
}

#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub reports: Vec<VariantReport>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.report.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.reports {
            let _ = writeln!(s, "{:<22} max {:.3e}", r.variant.name, r.report.max_rel_error());
            for (module, err) in r.report.by_module() {
                let _ = writeln!(s, "    {module:<14} {err:.3e}");
            }
        }
        let _ = writeln!(
            s,
            "overall max relative error {:.3e} (tolerance {:.1e}) in {:.1}s: {}",
            self.max_rel_error(),
            self.tolerance,
            self.seconds,
            if self.passed() { "ok" } else { "FAILED" }
        );
        s
    }
}

pub fn cmd_gradcheck(check: &PipelineCheck, tolerance: f64) -> Result<GradcheckSummary, CliError> {
    let started = Instant::now();
    let reports = gradcheck_all(check)?;
    Ok(GradcheckSummary {
        reports,
        tolerance,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Edge dump followed by a counts line.
pub fn render_graph(g: &CellGraph) -> String {
    let n = g.n;
    format!(
        "{}nodes={} edges={} static_edges={}\n",
        g.dump(),
        g.nodes(),
        g.edges().len(),
        5 * n * n.saturating_sub(1) / 2
    )
}

pub fn cmd_inspect_graph_n(n: usize) -> String {
    render_graph(&static_graph(n))
}

pub fn cmd_inspect_graph_checkpoint(
    checkpoint: &Path,
    corpus: &Path,
    sentence: &str,
    features: Option<&Path>,
) -> Result<String, CliError> {
    let loaded = Loaded::open(checkpoint)?;
    let all = load_split("--corpus", corpus)?;
    let s = all
        .iter()
        .find(|s| s.id == sentence)
        .ok_or_else(|| CliError::Input(format!("no sentence `{sentence}` in {}", corpus.display())))?;
    Ok(render_graph(&loaded.graph_for(s, features)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `(threshold, average dev F1)` for every grid point.
    pub sweep: Vec<(f64, f64)>,
    pub best_threshold: f64,
    pub best_average_f1: f64,
}

/// Thresholds 0.05, 0.10, ..., 1.45. Adjacent distances never exceed √2.
pub fn threshold_grid() -> Vec<f64> {
    (1..=29).map(|k| k as f64 * 0.05).collect()
}

/// Sweeps the split threshold on `corpus`. Ties keep the smaller threshold.
/// With `write`, the best value is stored in the checkpoint.
pub fn cmd_calibrate_threshold(
    checkpoint: &Path,
    corpus: &Path,
    grid: &[f64],
    write: bool,
    features: Option<&Path>,
) -> Result<Calibration, CliError> {
    if grid.is_empty() {
        return Err(CliError::Input("empty threshold grid".into()));
    }
    let loaded = Loaded::open(checkpoint)?;
    let gold = load_split("--corpus", corpus)?;
    let probs = loaded.probs(&gold, features)?;
    let sym = loaded.model().labels.symmetric();
    let mut sweep = Vec::with_capacity(grid.len());
    for &t in grid {
        let pred = decode_all(&loaded, &probs, &gold, t);
        sweep.push((t, evaluate(&pred, &gold, sym, false)?.average_f1()));
    }
    let (best_threshold, best_average_f1) = sweep
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
    if write {
        let meta = read_manifest(checkpoint)?;
        let epoch = meta.metadata.get("epoch").and_then(|e| e.as_u64()).map(|e| e as usize);
        match &loaded {
            Loaded::F32(m, s, _) => save_checkpoint(checkpoint, m, s, best_threshold, epoch)?,
            Loaded::F64(m, s, _) => save_checkpoint(checkpoint, m, s, best_threshold, epoch)?,
        }
    }
    Ok(Calibration {
        sweep,
        best_threshold,
        best_average_f1,
    })
}

pub fn load_synthetic_config(path: Option<&Path>) -> Result<SyntheticConfig, CliError> {
    match path {
        None => Ok(SyntheticConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str(&text).map_err(|e| {
                CliError::Config(ConfigError::Parse {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })
            })
        }
    }
}

pub fn cmd_gen_synthetic(seed: u64, count: usize, cfg: &SyntheticConfig, out: &Path) -> Result<(), CliError> {
    let corpus = gen_synthetic(seed, count, cfg).map_err(|source| CliError::Corpus {
        key: "synthetic".into(),
        source,
    })?;
    save_corpus(out, &corpus).map_err(|source| CliError::Corpus {
        key: "--out".into(),
        source,
    })
}

/// Settings for the held-out ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train_size: usize,
    pub dev_size: usize,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            train_size: 200,
            dev_size: 50,
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                max_epochs: 40,
                patience: 10,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                toml::from_str(&text).map_err(|e| {
                    CliError::Config(ConfigError::Parse {
                        path: p.to_path_buf(),
                        message: e.to_string(),
                    })
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub entity_f1: f64,
    pub relation_f1: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// The full model and its w/o-WNet and w/o-GNN variants.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut no_wnet = base.clone();
    no_wnet.wnet.enabled = false;
    let mut no_gnn = base.clone();
    no_gnn.graph.use_gnn = false;
    vec![
        ("full".into(), base.clone()),
        ("w/o WNet".into(), no_wnet),
        ("w/o GNN".into(), no_gnn),
    ]
}

/// Trains every variant on each seed's synthetic train split and scores it
/// on the held-out dev split. Rows are appended to `out_dir/ablation.jsonl`
/// as they finish.
pub fn cmd_ablation(cfg: &AblationConfig, out_dir: &Path, deterministic: bool) -> Result<Vec<AblationRow>, CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let all = gen_synthetic(seed, cfg.train_size + cfg.dev_size, &cfg.synthetic).map_err(|source| {
            CliError::Corpus {
                key: "synthetic".into(),
                source,
            }
        })?;
        let (train_part, dev_part) = all.split_at(cfg.train_size);
        let dir = out_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let (train_path, dev_path) = (dir.join("train.jsonl"), dir.join("dev.jsonl"));
        for (p, part) in [(&train_path, train_part), (&dev_path, dev_part)] {
            save_corpus(p, part).map_err(|source| CliError::Corpus {
                key: "ablation".into(),
                source,
            })?;
        }
        for (name, model) in ablation_variants(&cfg.model) {
            let run = RunConfig {
                data: crate::config::DataConfig {
                    train: train_path.clone(),
                    dev: dev_path.clone(),
                    test: None,
                    symmetric_relation_types: Vec::new(),
                    features_dir: None,
                },
                model,
                train: TrainConfig {
                    seed,
                    deterministic: cfg.train.deterministic || deterministic,
                    ..cfg.train.clone()
                },
                decode: cfg.decode.clone(),
            };
            let tag = name.replace("w/o ", "no-").to_lowercase();
            let summary = run_training(&run, Some(&dir.join(&tag)))?;
            let row = AblationRow {
                variant: name,
                seed,
                entity_f1: summary.dev.entity.f1,
                relation_f1: summary.dev.relation.f1,
                best_epoch: summary.best_epoch,
                epochs: summary.epochs,
            };
            log::info!("{row:?}");
            rows.push(row);
            write_jsonl(&out_dir.join("ablation.jsonl"), &rows)?;
        }
    }
    Ok(rows)
}

/// Mean relation and entity F1 per variant, with the directional verdict.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let mean = |name: &str, f: fn(&AblationRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>10} {:>10}", "variant", "entity F1", "rel F1");
    for n in &names {
        let _ = writeln!(s, "{n:<10} {:>10.4} {:>10.4}", mean(n, |r| r.entity_f1), mean(n, |r| r.relation_f1));
    }
    let full = mean("full", |r| r.relation_f1);
    for n in names.iter().filter(|n| **n != "full") {
        let other = mean(n, |r| r.relation_f1);
        let verdict = if full >= other { "holds" } else { "violated" };
        let _ = writeln!(s, "full >= {n} on relation F1: {verdict} ({full:.4} vs {other:.4})");
    }
    s
}
