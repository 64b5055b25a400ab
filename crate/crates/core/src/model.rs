//! The full pipeline: encoder, pair tables, WNet, cell graph, GNN and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{gold_binary_table, gold_table, BinaryTable, CorpusError, GoldTable, LabelSpace, Sentence};
use crate::decode::{decode, DecodedResult};
use crate::encoder::{
    DropoutCtx, Encoder, EncoderConfig, EncoderError, EncoderOutput, HeadTail, PrecomputedSpec, Vocab,
};
use crate::graph::{dynamic_graph, static_graph, BinaryHead, CellGraph, GraphConfig, GraphStrategy, Gnn};
use crate::heads::{HeadsError, LabelHead, LossReport, ProbTable};
use crate::nn::{NnError, ParameterStore, Scalar, Tape, Var};
use crate::table::{build_k, build_v, Biaffine, DistanceEmbedding, TableConfig, TableMode};
use crate::wnet::{WNet, WNetConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error("model input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Token ids through the built-in encoder.
    #[default]
    Tokens,
    /// Externally computed word states and attention maps.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input: InputMode,
    pub encoder: EncoderConfig,
    pub table: TableConfig,
    pub wnet: WNetConfig,
    pub graph: GraphConfig,
}

/// What the model reads for one sentence.
#[derive(Debug, Clone)]
pub enum ModelInput<T> {
    Tokens(Vec<usize>),
    Precomputed(EncoderOutput<T>),
}

impl<T: Scalar> ModelInput<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Tokens(ids) => ids.len(),
            Self::Precomputed(o) => o.states.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gold targets for one sentence.
#[derive(Debug, Clone)]
pub struct Targets {
    pub table: GoldTable,
    pub bits: BinaryTable,
}

impl Targets {
    pub fn new(s: &Sentence, ls: &LabelSpace) -> Result<Self, CorpusError> {
        let table = gold_table(s, ls)?;
        let bits = gold_binary_table(&table);
        Ok(Self { table, bits })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub n: usize,
    /// `[n * n, |Y|]`.
    pub label_logits: Var,
    /// `[n * n, 2]`, dynamic strategy only.
    pub bin_logits: Option<Var>,
    pub predicted_bits: Option<BinaryTable>,
    pub graph: Option<CellGraph>,
    pub entry_loss: Option<Var>,
    pub bin_loss: Option<Var>,
    pub loss: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub labels: LabelSpace,
    pub vocab: Vocab,
    encoder: Option<Encoder>,
    head_tail: HeadTail,
    distance: Option<DistanceEmbedding>,
    biaffine: Option<Biaffine>,
    wnet: WNet,
    bin_head: Option<BinaryHead>,
    gnn: Option<Gnn>,
    label_head: LabelHead,
}

impl Model {
    /// Builds the model and registers freshly initialised parameters.
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        labels: LabelSpace,
        vocab: Vocab,
        seed: u64,
    ) -> Result<(Self, ParameterStore<T>), ModelError> {
        let mut cfg = cfg.clone();
        if cfg.encoder.vocab_size == 0 {
            cfg.encoder.vocab_size = vocab.len();
        }
        if cfg.graph.layers == 0 {
            return Err(ModelError::Input("graph.layers must be >= 1".into()));
        }
        cfg.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let encoder = match cfg.input {
            InputMode::Tokens => Some(Encoder::new(&cfg.encoder, &mut store, &mut rng)?),
            InputMode::Precomputed => None,
        };
        let d = cfg.encoder.head_tail_dim;
        let head_tail = HeadTail::new(cfg.encoder.dim, d, &mut store, &mut rng)?;
        let (distance, biaffine) = match cfg.table.mode {
            TableMode::Concat => (
                Some(DistanceEmbedding::new(
                    cfg.table.distance_clamp,
                    cfg.table.distance_dim,
                    &mut store,
                    &mut rng,
                )?),
                None,
            ),
            TableMode::Biaffine => (None, Some(Biaffine::new(d, cfg.table.biaffine_dim, &mut store, &mut rng)?)),
        };
        let v = cfg.table.channels(d);
        let wnet = WNet::new(&cfg.wnet, v, cfg.encoder.attention_channels(), &mut store, &mut rng)?;
        let u = wnet.out_channels();
        let bin_head = match cfg.graph.strategy {
            GraphStrategy::Dynamic => Some(BinaryHead::new(u, &mut store)?),
            GraphStrategy::Static => None,
        };
        let (gnn, g) = if cfg.graph.use_gnn {
            let g = cfg.graph.dim.unwrap_or(u);
            (Some(Gnn::new(u, g, cfg.graph.layers, &mut store, &mut rng)?), g)
        } else {
            (None, u)
        };
        let label_head = LabelHead::new(g, labels.len(), &mut store)?;
        if cfg.encoder.freeze {
            store.set_requires_grad_prefix("encoder.", false);
        }
        Ok((
            Self {
                cfg,
                labels,
                vocab,
                encoder,
                head_tail,
                distance,
                biaffine,
                wnet,
                bin_head,
                gnn,
                label_head,
            },
            store,
        ))
    }

    pub fn input_for<T>(&self, s: &Sentence) -> ModelInput<T> {
        ModelInput::Tokens(self.vocab.ids(&s.tokens))
    }

    /// Shapes that imported features must have.
    pub fn precomputed_spec(&self) -> PrecomputedSpec {
        PrecomputedSpec {
            dim: self.cfg.encoder.dim,
            attention_channels: self.cfg.encoder.attention_channels(),
            use_attention_input: self.wnet.uses_attention(),
        }
    }

    /// Records the whole pipeline. Losses are recorded when `targets` is given;
    /// `training` enables dropout and teacher-forced graphs.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        input: &ModelInput<T>,
        targets: Option<&Targets>,
        dropout: Option<DropoutCtx<'_>>,
    ) -> Result<ForwardOutput, ModelError> {
        let training = dropout.is_some();
        let n = input.len();
        if n == 0 {
            return Err(ModelError::Input("empty sentence".into()));
        }
        let (states, attention) = match (input, &self.encoder) {
            (ModelInput::Tokens(ids), Some(enc)) => {
                let vars = enc.forward(tape, ids, dropout)?;
                let k = if self.wnet.uses_attention() {
                    Some(build_k(tape, &vars.attention)?)
                } else {
                    None
                };
                (vars.states, k)
            }
            (ModelInput::Precomputed(out), None) => {
                let states = tape.constant(out.states.clone())?;
                let k = match (&out.attention, self.wnet.uses_attention()) {
                    (Some(a), true) => Some(tape.constant(a.clone())?),
                    (None, true) => return Err(ModelError::Input("attention maps required".into())),
                    _ => None,
                };
                (states, k)
            }
            (ModelInput::Tokens(_), None) => {
                return Err(ModelError::Input("model expects precomputed features".into()))
            }
            (ModelInput::Precomputed(_), Some(_)) => {
                return Err(ModelError::Input("model expects token ids".into()))
            }
        };
        if let Some(t) = targets {
            if t.table.n != n {
                return Err(ModelError::Input(format!("gold table n = {}, input n = {n}", t.table.n)));
            }
        }
        let (head, tail) = self.head_tail.forward(tape, states)?;
        let v = match (&self.distance, &self.biaffine) {
            (Some(dist), _) => build_v(tape, head, tail, dist)?,
            (None, Some(b)) => b.forward(tape, head, tail)?,
            (None, None) => unreachable!("one table builder is always present"),
        };
        let u = self.wnet.forward(tape, v, attention)?;

        let (bin_logits, predicted_bits, graph) = match &self.bin_head {
            Some(bh) => {
                let (logits, bits) = bh.predict_binary(tape, u)?;
                let source = match targets {
                    Some(t) if training && self.cfg.graph.teacher_forcing => &t.bits,
                    _ => &bits,
                };
                let graph = dynamic_graph(source);
                (Some(logits), Some(bits), graph)
            }
            None => (None, None, static_graph(n)),
        };
        let g = match &self.gnn {
            Some(gnn) => gnn.forward(tape, u, &graph)?,
            None => u,
        };
        let label_logits = self.label_head.logits(tape, g)?;

        let (mut entry_loss, mut bin_loss, mut loss) = (None, None, None);
        if let Some(t) = targets {
            let entry = tape.cross_entropy(label_logits, &t.table.labels, None)?;
            let total = match bin_logits {
                Some(bl) => {
                    let gold_bits: Vec<usize> = t.bits.bits.iter().map(|&b| b as usize).collect();
                    let bin = tape.cross_entropy(bl, &gold_bits, None)?;
                    bin_loss = Some(bin);
                    tape.add(entry, bin)?
                }
                None => entry,
            };
            entry_loss = Some(entry);
            loss = Some(total);
        }
        Ok(ForwardOutput {
            n,
            label_logits,
            bin_logits,
            predicted_bits,
            graph: self.gnn.as_ref().map(|_| graph),
            entry_loss,
            bin_loss,
            loss,
        })
    }

    /// Label distributions for one sentence.
    pub fn predict_probs<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        input: &ModelInput<T>,
    ) -> Result<ProbTable, ModelError> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, input, None, None)?;
        let logits = tape.value(out.label_logits).to_f64_vec();
        Ok(ProbTable::from_logits(out.n, self.labels.len(), logits)?)
    }

    pub fn predict<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        input: &ModelInput<T>,
        threshold: f64,
    ) -> Result<DecodedResult, ModelError> {
        let probs = self.predict_probs(store, input)?;
        Ok(decode(&probs, threshold, &self.labels))
    }

    /// Loss values for one sentence without dropout.
    pub fn loss_report<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        input: &ModelInput<T>,
        targets: &Targets,
    ) -> Result<LossReport, ModelError> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, input, Some(targets), None)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).item().as_f64()).unwrap_or(0.0);
        Ok(LossReport::new(
            get(out.entry_loss),
            get(out.bin_loss),
            self.cfg.graph.strategy,
            out.n * out.n,
        ))
    }
}
