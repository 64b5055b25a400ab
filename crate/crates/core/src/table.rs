//! Word-pair feature tables: the `V` table from head/tail states and the `K`
//! table of stacked attention maps.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::stack_attention;
use crate::nn::{NnError, ParamId, ParameterStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TableMode {
    /// `[h_i; t_j; h_i - t_j; h_i * t_j; dist(i, j)]`
    #[default]
    Concat,
    /// Biaffine scores of `h_i` and `t_j` with bias terms.
    Biaffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableConfig {
    pub mode: TableMode,
    /// Width `c` of the distance embedding.
    pub distance_dim: usize,
    /// Distances are clamped to this value.
    pub distance_clamp: usize,
    /// Output channels of the biaffine table.
    pub biaffine_dim: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            mode: TableMode::Concat,
            distance_dim: 150,
            distance_clamp: 64,
            biaffine_dim: 150,
        }
    }
}

impl TableConfig {
    /// Channel count `v` of the `V` table given head/tail width `d`.
    pub fn channels(&self, d: usize) -> usize {
        match self.mode {
            TableMode::Concat => 4 * d + self.distance_dim,
            TableMode::Biaffine => self.biaffine_dim,
        }
    }
}

/// Learned embedding of the clamped distance `min(|i - j|, clamp)`.
#[derive(Debug, Clone)]
pub struct DistanceEmbedding {
    pub table: ParamId,
    pub clamp: usize,
    pub dim: usize,
}

impl DistanceEmbedding {
    pub fn new<T: Scalar>(
        clamp: usize,
        dim: usize,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            table: store.register_uniform("table.dist_emb", &[clamp + 1, dim], 1, rng)?,
            clamp,
            dim,
        })
    }

    /// Row index for every cell of an `n x n` table, row-major.
    pub fn indices(&self, n: usize) -> Vec<usize> {
        distance_indices(n, self.clamp)
    }
}

pub fn distance_indices(n: usize, clamp: usize) -> Vec<usize> {
    (0..n * n).map(|c| (c / n).abs_diff(c % n).min(clamp)).collect()
}

/// Concatenated pair table `[n, n, 4d + c]` on the tape.
pub fn build_v<T: Scalar>(
    tape: &mut Tape<'_, T>,
    head: Var,
    tail: Var,
    dist: &DistanceEmbedding,
) -> Result<Var, NnError> {
    let n = tape.shape(head)[0];
    if tape.shape(tail) != tape.shape(head) {
        return Err(NnError::Shape(format!(
            "head {:?} and tail {:?} differ",
            tape.shape(head),
            tape.shape(tail)
        )));
    }
    let h = tape.pair_expand(head, true)?;
    let t = tape.pair_expand(tail, false)?;
    let diff = tape.sub(h, t)?;
    let prod = tape.mul(h, t)?;
    let table = tape.param(dist.table);
    let emb = tape.embedding_lookup(table, &dist.indices(n))?;
    let emb = tape.reshape(emb, &[n, n, dist.dim])?;
    tape.concat(&[h, t, diff, prod, emb], 2)
}

/// Biaffine pair table with bias: `[h_i; 1]^T U_k [t_j; 1]` for each output channel `k`.
#[derive(Debug, Clone)]
pub struct Biaffine {
    pub weight: ParamId,
    pub out: usize,
    pub dim: usize,
}

impl Biaffine {
    pub fn new<T: Scalar>(
        dim: usize,
        out: usize,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            weight: store.register_uniform("table.biaffine", &[dim + 1, out * (dim + 1)], dim + 1, rng)?,
            out,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, head: Var, tail: Var) -> Result<Var, NnError> {
        let n = tape.shape(head)[0];
        let ones = tape.constant(Tensor::ones(&[n, 1]))?;
        let h1 = tape.concat(&[head, ones], 1)?;
        let t1 = tape.concat(&[tail, ones], 1)?;
        let u = tape.param(self.weight);
        // a[i][k * (d + 1) + l] = sum_m h1[i][m] U[m][k * (d + 1) + l]
        let a = tape.matmul(h1, u)?;
        tape.pair_bilinear(a, t1, self.out)
    }
}

/// Attention table `[n, n, layers * heads]` from per-head maps.
pub fn build_k<T: Scalar>(tape: &mut Tape<'_, T>, maps: &[Var]) -> Result<Var, NnError> {
    if maps.is_empty() {
        return Err(NnError::Shape("no attention maps".into()));
    }
    stack_attention(tape, maps)
}
