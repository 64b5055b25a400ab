//! High-order cell graphs over the `n x n` table and the graph convolution
//! that calibrates cell features.

use std::fmt::Write as _;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BinaryTable;
use crate::nn::{NnError, ParamId, ParameterStore, Scalar, SparseAdjacency, Tape, Tensor, Var};

/// Predicted non-`⊥` indicator `b̂`.
pub type BinaryPredictionTable = BinaryTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GraphStrategy {
    #[default]
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub strategy: GraphStrategy,
    pub use_gnn: bool,
    pub layers: usize,
    /// Output width of the GNN; defaults to the WNet output width.
    pub dim: Option<usize>,
    /// Build training-time dynamic graphs from gold bits instead of predictions.
    pub teacher_forcing: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            strategy: GraphStrategy::Static,
            use_gnn: true,
            layers: 1,
            dim: None,
            teacher_forcing: false,
        }
    }
}

/// Undirected graph over cells; node `(i, j)` has id `i * n + j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGraph {
    pub n: usize,
    /// Canonical `(low, high)` pairs, sorted, no duplicates or self-loops.
    edges: Vec<(usize, usize)>,
}

impl CellGraph {
    /// Canonicalizes, sorts and deduplicates `edges`.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, NnError> {
        let nodes = n * n;
        let mut out = Vec::new();
        for (a, b) in edges {
            for x in [a, b] {
                if x >= nodes {
                    return Err(NnError::Index {
                        what: "graph node",
                        index: x,
                        size: nodes,
                    });
                }
            }
            if a != b {
                out.push((a.min(b), a.max(b)));
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self { n, edges: out })
    }

    pub fn nodes(&self) -> usize {
        self.n * self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    pub fn cell(&self, id: usize) -> (usize, usize) {
        (id / self.n, id % self.n)
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// Neighbour lists per node, ascending.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    /// `D^-1/2 (A + I) D^-1/2` in compressed-row form.
    pub fn normalized_adjacency<T: Scalar>(&self) -> SparseAdjacency<T> {
        let nb = self.neighbours();
        let inv_sqrt: Vec<f64> = nb.iter().map(|l| 1.0 / ((l.len() + 1) as f64).sqrt()).collect();
        let mut row_ptr = Vec::with_capacity(nb.len() + 1);
        let mut col_idx = Vec::with_capacity(2 * self.edges.len() + nb.len());
        let mut weights = Vec::with_capacity(col_idx.capacity());
        row_ptr.push(0);
        for (r, l) in nb.iter().enumerate() {
            let mut cols = l.clone();
            cols.push(r);
            cols.sort_unstable();
            for c in cols {
                col_idx.push(c);
                weights.push(T::from_f64_lossy(inv_sqrt[r] * inv_sqrt[c]));
            }
            row_ptr.push(col_idx.len());
        }
        SparseAdjacency {
            rows: nb.len(),
            row_ptr,
            col_idx,
            weights,
        }
    }

    /// One `"i,j -- k,l"` line per edge.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for &(a, b) in &self.edges {
            let ((i, j), (k, l)) = (self.cell(a), self.cell(b));
            let _ = writeln!(s, "{i},{j} -- {k},{l}");
        }
        s
    }
}

/// Every pair of diagonal cells, and every off-diagonal cell to its two
/// diagonal anchors `(i, i)` and `(j, j)`.
pub fn static_graph(n: usize) -> CellGraph {
    let mut edges = Vec::with_capacity(5 * n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..n {
            if i < j {
                edges.push((i * n + i, j * n + j));
            }
            if i != j {
                edges.push((i * n + j, i * n + i));
                edges.push((i * n + j, j * n + j));
            }
        }
    }
    CellGraph::from_edges(n, edges).expect("static edges are in range")
}

/// Edges licensed by predicted non-`⊥` bits under the static rules.
pub fn dynamic_graph(b: &BinaryPredictionTable) -> CellGraph {
    let n = b.n;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if i < j && b.get(i, i) == 1 && b.get(j, j) == 1 {
                edges.push((i * n + i, j * n + j));
            }
            if b.get(i, j) == 1 {
                edges.push((i * n + j, i * n + i));
                edges.push((i * n + j, j * n + j));
            }
        }
    }
    CellGraph::from_edges(n, edges).expect("dynamic edges are in range")
}

/// Per-cell argmax of `[n * n, 2]` logits; ties go to 0.
pub fn binary_argmax<T: Scalar>(n: usize, logits: &Tensor<T>) -> BinaryPredictionTable {
    BinaryTable {
        n,
        bits: logits
            .data()
            .chunks(2)
            .map(|c| u8::from(c[1] > c[0]))
            .collect(),
    }
}

/// Cellwise two-way classifier over `U` that predicts non-`⊥` cells.
#[derive(Debug, Clone)]
pub struct BinaryHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl BinaryHead {
    /// Zero-initialised, so an untrained head predicts every cell as `⊥`.
    pub fn new<T: Scalar>(u: usize, store: &mut ParameterStore<T>) -> Result<Self, NnError> {
        Ok(Self {
            w: store.register_zeros("bin_head.w", &[u, 2])?,
            b: store.register_zeros("bin_head.b", &[2])?,
        })
    }

    /// Returns `[n * n, 2]` logits and the argmax table.
    pub fn predict_binary<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        u: Var,
    ) -> Result<(Var, BinaryPredictionTable), NnError> {
        let s = tape.shape(u).to_vec();
        if s.len() != 3 || s[0] != s[1] {
            return Err(NnError::Shape(format!("predict_binary expects [n, n, u], got {s:?}")));
        }
        let flat = tape.reshape(u, &[s[0] * s[0], s[2]])?;
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let logits = tape.linear(flat, w, Some(b))?;
        let bits = binary_argmax(s[0], tape.value(logits));
        let chosen = tape.decide(bits.bits.iter().map(|&b| b as usize).collect())?;
        let bits = BinaryTable {
            n: bits.n,
            bits: chosen.into_iter().map(|b| b as u8).collect(),
        };
        Ok((logits, bits))
    }
}

/// Stack of graph-convolution layers `X' = GELU(Â X W)`.
#[derive(Debug, Clone)]
pub struct Gnn {
    pub weights: Vec<ParamId>,
    pub dim: usize,
}

impl Gnn {
    pub fn new<T: Scalar>(
        input: usize,
        dim: usize,
        layers: usize,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if layers == 0 {
            return Err(NnError::Shape("gnn needs at least one layer".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut c = input;
        for l in 0..layers {
            weights.push(store.register_uniform(&format!("gnn.layer{l}.w"), &[c, dim], c, rng)?);
            c = dim;
        }
        Ok(Self { weights, dim })
    }

    /// `U: [n, n, u]` to `G: [n, n, dim]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, u: Var, graph: &CellGraph) -> Result<Var, NnError> {
        let s = tape.shape(u).to_vec();
        if s.len() != 3 || s[0] != graph.n || s[1] != graph.n {
            return Err(NnError::Shape(format!(
                "gnn input {s:?} for a graph over {0}x{0} cells",
                graph.n
            )));
        }
        let adj = Arc::new(graph.normalized_adjacency::<T>());
        let mut x = tape.reshape(u, &[graph.nodes(), s[2]])?;
        for &w in &self.weights {
            let w = tape.param(w);
            let msg = tape.propagate(x, adj.clone())?;
            let y = tape.matmul(msg, w)?;
            x = tape.gelu(y)?;
        }
        tape.reshape(x, &[graph.n, graph.n, self.dim])
    }
}
