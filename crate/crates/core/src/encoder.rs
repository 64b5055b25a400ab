//! Small trainable transformer encoder standing in for a pretrained language
//! model, plus the head/tail MLPs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::archive::{read_archive, write_archive};
use crate::nn::{NnError, ParamId, ParameterStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty input")]
    Empty,
    #[error("sentence of {n} tokens exceeds max length {max}")]
    TooLong { n: usize, max: usize },
    #[error("unknown token id {id} (vocabulary size {size})")]
    UnknownToken { id: usize, size: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("precomputed features: {0}")]
    Precomputed(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Filled in from the training vocabulary when left at 0.
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Output width `d` of the head and tail MLPs.
    pub head_tail_dim: usize,
    pub freeze: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            dim: 128,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_len: 64,
            dropout: 0.0,
            head_tail_dim: 150,
            freeze: false,
        }
    }
}

impl EncoderConfig {
    /// Number of attention channels `k = layers * heads`.
    pub fn attention_channels(&self) -> usize {
        self.layers * self.heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(EncoderError::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.max_len == 0 || self.head_tail_dim == 0 {
            return Err(EncoderError::Config("layers, max_len and head_tail_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Token-to-id map; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

pub const UNK: &str = "<unk>";

impl Vocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let set: BTreeSet<&String> = tokens.into_iter().collect();
        let mut out = vec![UNK.to_string()];
        out.extend(set.into_iter().filter(|t| t.as_str() != UNK).cloned());
        Self { tokens: out }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Per-word states `[n, m]` and stacked attention maps `[n, n, layers * heads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub states: Tensor<T>,
    pub attention: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTailStates<T> {
    pub head: Tensor<T>,
    pub tail: Tensor<T>,
}

/// Encoder activations recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub states: Var,
    /// One `[n, n]` attention map per (layer, head), layer-major.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            w: store.register_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?,
            b: store.register_uniform(&format!("{name}.b"), &[fan_out], fan_in, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NnError> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize) -> Result<Self, NnError> {
        Ok(Self {
            gamma: store.register(&format!("{name}.g"), Tensor::ones(&[dim]))?,
            beta: store.register_zeros(&format!("{name}.b"), &[dim])?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NnError> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, 1e-5)
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln1: Norm,
    ff1: Dense,
    ff2: Dense,
    ln2: Norm,
}

/// Dropout source for training-time forwards.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    ctx: &mut Option<DropoutCtx<'_>>,
) -> Result<Var, NnError> {
    match ctx {
        Some(c) if c.rate > 0.0 => {
            let keep = T::from_f64_lossy(1.0 / (1.0 - c.rate));
            let mask = (0..tape.value(x).len())
                .map(|_| if c.rng.gen_bool(c.rate) { T::zero() } else { keep })
                .collect();
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        cfg: &EncoderConfig,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(EncoderError::Config("vocab_size must be >= 1".into()));
        }
        let m = cfg.dim;
        let tok_emb = store.register_uniform("encoder.tok_emb", &[cfg.vocab_size, m], 1, rng)?;
        let pos_emb = store.register_uniform("encoder.pos_emb", &[cfg.max_len, m], 1, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("encoder.layer{l}");
            blocks.push(Block {
                q: Dense::new(store, &format!("{p}.q"), m, m, rng)?,
                k: Dense::new(store, &format!("{p}.k"), m, m, rng)?,
                v: Dense::new(store, &format!("{p}.v"), m, m, rng)?,
                o: Dense::new(store, &format!("{p}.o"), m, m, rng)?,
                ln1: Norm::new(store, &format!("{p}.ln1"), m)?,
                ff1: Dense::new(store, &format!("{p}.ff1"), m, cfg.ff_dim, rng)?,
                ff2: Dense::new(store, &format!("{p}.ff2"), cfg.ff_dim, m, rng)?,
                ln2: Norm::new(store, &format!("{p}.ln2"), m)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Records the encoder on `tape`. Dropout is active only when `dropout` is given.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &[usize],
        mut dropout: Option<DropoutCtx<'_>>,
    ) -> Result<EncoderVars, EncoderError> {
        let n = ids.len();
        if n == 0 {
            return Err(EncoderError::Empty);
        }
        if n > self.cfg.max_len {
            return Err(EncoderError::TooLong {
                n,
                max: self.cfg.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(EncoderError::UnknownToken {
                id: bad,
                size: self.cfg.vocab_size,
            });
        }
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.param(self.tok_emb);
        let pos = tape.param(self.pos_emb);
        let te = tape.embedding_lookup(tok, ids)?;
        let pe = tape.embedding_lookup(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        x = maybe_dropout(tape, x, &mut dropout)?;

        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::with_capacity(self.cfg.attention_channels());
        for block in &self.blocks {
            let q = block.q.forward(tape, x)?;
            let k = block.k.forward(tape, x)?;
            let v = block.v.forward(tape, x)?;
            let mut head_out = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.narrow(q, 1, h * dh, dh)?;
                let kh = tape.narrow(k, 1, h * dh, dh)?;
                let vh = tape.narrow(v, 1, h * dh, dh)?;
                let scores = tape.matmul_t(qh, kh, false, true)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax(scores, 1)?;
                attention.push(attn);
                head_out.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat(&head_out, 1)?;
            let a = block.o.forward(tape, merged)?;
            let a = maybe_dropout(tape, a, &mut dropout)?;
            let r = tape.add(x, a)?;
            x = block.ln1.forward(tape, r)?;
            let f = block.ff1.forward(tape, x)?;
            let f = tape.gelu(f)?;
            let f = block.ff2.forward(tape, f)?;
            let f = maybe_dropout(tape, f, &mut dropout)?;
            let r = tape.add(x, f)?;
            x = block.ln2.forward(tape, r)?;
        }
        Ok(EncoderVars {
            states: x,
            attention,
        })
    }

    /// Inference-mode encoding to plain tensors.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ids: &[usize],
    ) -> Result<EncoderOutput<T>, EncoderError> {
        let mut tape = Tape::new(store);
        let vars = self.forward(&mut tape, ids, None)?;
        let k = stack_attention(&mut tape, &vars.attention)?;
        Ok(EncoderOutput {
            states: tape.value(vars.states).clone(),
            attention: Some(tape.value(k).clone()),
        })
    }
}

/// Stacks `[n, n]` maps into an `[n, n, k]` table, channel order preserved.
pub fn stack_attention<T: Scalar>(tape: &mut Tape<'_, T>, maps: &[Var]) -> Result<Var, NnError> {
    let n = tape.shape(maps[0])[0];
    let cols = maps
        .iter()
        .map(|&a| tape.reshape(a, &[n, n, 1]))
        .collect::<Result<Vec<_>, _>>()?;
    tape.concat(&cols, 2)
}

/// Two independent single-hidden-layer GELU MLPs applied row-wise.
#[derive(Debug, Clone)]
pub struct HeadTail {
    head: (Dense, Dense),
    tail: (Dense, Dense),
    dim: usize,
}

impl HeadTail {
    pub fn new<T: Scalar>(
        input_dim: usize,
        dim: usize,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            head: (
                Dense::new(store, "head_mlp.l1", input_dim, dim, rng)?,
                Dense::new(store, "head_mlp.l2", dim, dim, rng)?,
            ),
            tail: (
                Dense::new(store, "tail_mlp.l1", input_dim, dim, rng)?,
                Dense::new(store, "tail_mlp.l2", dim, dim, rng)?,
            ),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, states: Var) -> Result<(Var, Var), NnError> {
        let mlp = |tape: &mut Tape<'_, T>, (l1, l2): &(Dense, Dense)| -> Result<Var, NnError> {
            let h = l1.forward(tape, states)?;
            let h = tape.gelu(h)?;
            l2.forward(tape, h)
        };
        Ok((mlp(tape, &self.head)?, mlp(tape, &self.tail)?))
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        states: &Tensor<T>,
    ) -> Result<HeadTailStates<T>, NnError> {
        let mut tape = Tape::new(store);
        let s = tape.constant(states.clone())?;
        let (h, t) = self.forward(&mut tape, s)?;
        Ok(HeadTailStates {
            head: tape.value(h).clone(),
            tail: tape.value(t).clone(),
        })
    }
}

/// Writes precomputed encoder features as a tensor archive.
pub fn export_precomputed<T: Scalar>(
    dir: &Path,
    sentence_id: &str,
    out: &EncoderOutput<T>,
) -> Result<(), EncoderError> {
    let mut entries = vec![("states", &out.states)];
    if let Some(a) = &out.attention {
        entries.push(("attention", a));
    }
    write_archive(dir, &entries, serde_json::json!({ "sentence_id": sentence_id }))?;
    Ok(())
}

/// Expected layout of imported features.
#[derive(Debug, Clone, Copy)]
pub struct PrecomputedSpec {
    pub dim: usize,
    pub attention_channels: usize,
    pub use_attention_input: bool,
}

/// Reads features written by [`export_precomputed`] (or an external exporter).
pub fn load_precomputed<T: Scalar>(
    dir: &Path,
    spec: &PrecomputedSpec,
) -> Result<(String, EncoderOutput<T>), EncoderError> {
    let (entries, manifest) = read_archive::<T>(dir)?;
    let id = manifest
        .metadata
        .get("sentence_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| EncoderError::Precomputed("manifest lacks sentence_id".into()))?
        .to_string();
    let mut states = None;
    let mut attention = None;
    for (name, t) in entries {
        match name.as_str() {
            "states" => states = Some(t),
            "attention" => attention = Some(t),
            other => {
                return Err(EncoderError::Precomputed(format!("unexpected entry `{other}`")));
            }
        }
    }
    let states = states.ok_or_else(|| EncoderError::Precomputed("missing `states`".into()))?;
    if states.rank() != 2 || states.dim(1) != spec.dim || states.dim(0) == 0 {
        return Err(EncoderError::Precomputed(format!(
            "states shape {:?}, expected [n, {}]",
            states.shape(),
            spec.dim
        )));
    }
    let n = states.dim(0);
    match &attention {
        Some(a) if a.shape() != [n, n, spec.attention_channels] => {
            return Err(EncoderError::Precomputed(format!(
                "attention shape {:?}, expected [{n}, {n}, {}]",
                a.shape(),
                spec.attention_channels
            )));
        }
        None if spec.use_attention_input => {
            return Err(EncoderError::Precomputed(
                "attention omitted but use_attention_input is set".into(),
            ));
        }
        _ => {}
    }
    Ok((id, EncoderOutput { states, attention }))
}
