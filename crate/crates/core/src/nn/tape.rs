use std::sync::Arc;

use super::float::{erf, Scalar};
use super::params::{ParamGrads, ParamId, ParameterStore};
use super::tensor::{axis_extents, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted sparse matrix in compressed-row form, used for message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency<T> {
    pub rows: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> SparseAdjacency<T> {
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    PairExpand {
        x: Var,
        by_row: bool,
    },
    ResizeTable(Var),
    MaskCells {
        x: Var,
        valid_h: usize,
        valid_w: usize,
    },
    Propagate {
        x: Var,
        adj: Arc<SparseAdjacency<T>>,
    },
    PairBilinear {
        a: Var,
        tail: Var,
        out: usize,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Conv3x3 { .. } => "conv2d_3x3",
            Op::MaxPool2 { .. } => "maxpool_2x2",
            Op::Upsample2(_) => "upsample_nearest_2x",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::PairExpand { .. } => "pair_expand",
            Op::ResizeTable(_) => "resize_table",
            Op::MaskCells { .. } => "mask_cells",
            Op::Propagate { .. } => "propagate",
            Op::PairBilinear { .. } => "pair_bilinear",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation over a borrowed parameter store.
///
/// Node ids are assigned in creation order, so the tape is always a DAG in
/// topological order and backward is a single reverse sweep.
pub struct Tape<'p, T> {
    params: &'p ParameterStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    decisions: Decisions,
}

/// Discrete choices made during a forward pass (pooling winners, predicted
/// graph edges). A replaying tape reuses the recorded choices in order.
#[derive(Debug, Clone, Default)]
enum Decisions {
    #[default]
    Off,
    Record(Vec<Vec<usize>>),
    Replay { log: Arc<Vec<Vec<usize>>>, next: usize },
}

/// Gradients produced by [`Tape::backward`] for leaves and parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: ParamGrads<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<(), NnError> {
    if a != b {
        return Err(NnError::Shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + erf(x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + erf(x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)));
    let pdf = (-half * x * x).exp() * T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// im2col for a zero-padded 3x3 stencil over an `[h, w, c]` table.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut cols = vec![T::zero(); h * w * k];
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * k..(i * w + j + 1) * k];
            for dy in 0..3 {
                let si = i as isize + dy as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sj = j as isize + dx as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    let dst = (dy * 3 + dx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let k = 9 * c;
    for i in 0..h {
        for j in 0..w {
            let row = &dcols[(i * w + j) * k..(i * w + j + 1) * k];
            for dy in 0..3 {
                let si = i as isize + dy as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for dxo in 0..3 {
                    let sj = j as isize + dxo as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let dst = (si as usize * w + sj as usize) * c;
                    let src = (dy * 3 + dxo) * c;
                    for ch in 0..c {
                        dx[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
}

/// Row and column strides of a possibly transposed row-major `[rows, cols]` buffer.
fn op_strides(ld: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, ld as isize)
    } else {
        (ld as isize, 1)
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParameterStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            decisions: Decisions::Off,
        }
    }

    /// A tape that keeps a log of its discrete choices, see [`Tape::take_decisions`].
    pub fn recording(params: &'p ParameterStore<T>) -> Self {
        Self {
            decisions: Decisions::Record(Vec::new()),
            ..Self::new(params)
        }
    }

    /// A tape that makes the same discrete choices as the recorded pass.
    pub fn replaying(params: &'p ParameterStore<T>, log: Arc<Vec<Vec<usize>>>) -> Self {
        Self {
            decisions: Decisions::Replay { log, next: 0 },
            ..Self::new(params)
        }
    }

    pub fn take_decisions(&mut self) -> Vec<Vec<usize>> {
        match std::mem::take(&mut self.decisions) {
            Decisions::Record(log) => log,
            _ => Vec::new(),
        }
    }

    /// Passes a discrete choice through the decision log. When replaying,
    /// the recorded choice replaces `computed`.
    pub fn decide(&mut self, computed: Vec<usize>) -> Result<Vec<usize>, NnError> {
        match &mut self.decisions {
            Decisions::Off => Ok(computed),
            Decisions::Record(log) => {
                log.push(computed.clone());
                Ok(computed)
            }
            Decisions::Replay { log, next } => {
                let d = log
                    .get(*next)
                    .filter(|d| d.len() == computed.len())
                    .ok_or_else(|| NnError::Shape(format!("replayed decision {next} does not match the forward pass")))?;
                *next += 1;
                Ok(d.clone())
            }
        }
    }

    pub fn params(&self) -> &'p ParameterStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Inputs that require grad receive entries in [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NnError> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NnError> {
        self.leaf(value, false)
    }

    /// Brings a registered parameter onto the tape (at most one node per parameter).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let requires_grad = self.params.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var, NnError> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        Ok(self.param(id))
    }

    // ---- elementwise -------------------------------------------------

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op.name(), va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var, NnError> {
        let out = self.value(x).map(|v| v * alpha);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, alpha), rg)
    }

    /// Adds a `[c]` vector to every position of a `[.., c]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = *vx.shape().last().unwrap_or(&0);
        if vb.shape() != [c] {
            return Err(NnError::Shape(format!(
                "add_bias: bias {:?} for input {:?}",
                vb.shape(),
                vx.shape()
            )));
        }
        let mut out = vx.clone();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, &b) in chunk.iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout with a precomputed keep mask (`1/(1-p)` or `0` per element).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var, NnError> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(NnError::Shape("dropout mask length".into()));
        }
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// `op(a) · op(b)` for rank-2 operands, `op` optionally transposing.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(NnError::Shape(format!("matmul expects rank 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(NnError::Shape(format!(
                "matmul inner dims: {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let (ra, ca) = op_strides(sa[1], ta);
        let (rb, cb) = op_strides(sb[1], tb);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            ra,
            ca,
            self.value(b).data(),
            rb,
            cb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · W + b` with `x: [r, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- tables and images (`[h, w, c]` layout) ------------------------

    /// 3x3 convolution, stride 1, zero padding 1. `w: [9 * c_in, c_out]`, `b: [c_out]`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(NnError::Shape(format!("conv2d_3x3 expects [h, w, c], got {sx:?}")));
        }
        let (h, wd, c) = (sx[0], sx[1], sx[2]);
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sw[0] != 9 * c {
            return Err(NnError::Shape(format!(
                "conv2d_3x3 weight {sw:?} for {c} input channels"
            )));
        }
        let cout = sw[1];
        if self.shape(b) != [cout] {
            return Err(NnError::Shape(format!("conv2d_3x3 bias {:?}", self.shape(b))));
        }
        let cols = im2col(self.value(x).data(), h, wd, c);
        let mut out = vec![T::zero(); h * wd * cout];
        for chunk in out.chunks_mut(cout.max(1)) {
            chunk.copy_from_slice(self.value(b).data());
        }
        T::gemm(
            h * wd,
            9 * c,
            cout,
            T::one(),
            &cols,
            (9 * c) as isize,
            1,
            self.value(w).data(),
            cout as isize,
            1,
            T::one(),
            &mut out,
            cout as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let keep = if self.rg(w) { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![h, wd, cout], out)?,
            Op::Conv3x3 { x, w, b, cols: keep },
            rg,
        )
    }

    pub fn maxpool_2x2(&mut self, x: Var) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        let (h, w) = (sx.first().copied().unwrap_or(0), sx.get(1).copied().unwrap_or(0));
        self.maxpool_2x2_within(x, h, w)
    }

    /// 2x2 max pooling that only sees cells with row < `vh` and column < `vw`.
    /// Windows with no such cell yield 0.
    pub fn maxpool_2x2_within(&mut self, x: Var, vh: usize, vw: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || !sx[0].is_multiple_of(2) || !sx[1].is_multiple_of(2) {
            return Err(NnError::Shape(format!("maxpool_2x2 expects even [h, w, c], got {sx:?}")));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut argmax = vec![usize::MAX; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let o = (i * wo + j) * c + ch;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (r, q) = (2 * i + di, 2 * j + dj);
                        if r >= vh || q >= vw {
                            continue;
                        }
                        let idx = (r * w + q) * c + ch;
                        if argmax[o] == usize::MAX || src[idx] > src[argmax[o]] {
                            argmax[o] = idx;
                        }
                    }
                }
            }
        }
        let argmax = self.decide(argmax)?;
        let src = self.value(x).data();
        let out: Vec<T> = argmax
            .iter()
            .map(|&idx| if idx == usize::MAX { T::zero() } else { src[idx] })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![ho, wo, c], out)?, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(NnError::Shape(format!("upsample expects [h, w, c], got {sx:?}")));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); 4 * h * w * c];
        for i in 0..2 * h {
            for j in 0..2 * w {
                let s = ((i / 2) * w + j / 2) * c;
                let d = (i * 2 * w + j) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![2 * h, 2 * w, c], out)?, Op::Upsample2(x), rg)
    }

    /// Zero-pads (bottom/right) or crops a `[h, w, c]` table to `[new_h, new_w, c]`.
    pub fn resize_table(&mut self, x: Var, new_h: usize, new_w: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(NnError::Shape(format!("resize_table expects [h, w, c], got {sx:?}")));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); new_h * new_w * c];
        for i in 0..h.min(new_h) {
            for j in 0..w.min(new_w) {
                let s = (i * w + j) * c;
                let d = (i * new_w + j) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![new_h, new_w, c], out)?, Op::ResizeTable(x), rg)
    }

    /// Zeroes every cell outside the top-left `valid_h x valid_w` region.
    pub fn mask_cells(&mut self, x: Var, valid_h: usize, valid_w: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(NnError::Shape(format!("mask_cells expects [h, w, c], got {sx:?}")));
        }
        let (w, c) = (sx[1], sx[2]);
        let mut out = self.value(x).clone();
        for (cell, chunk) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
            if cell / w >= valid_h || cell % w >= valid_w {
                chunk.fill(T::zero());
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaskCells { x, valid_h, valid_w }, rg)
    }

    /// `[n, c] -> [n, n, c]`: `out[i][j] = x[i]` when `by_row`, else `x[j]`.
    pub fn pair_expand(&mut self, x: Var, by_row: bool) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(NnError::Shape(format!("pair_expand expects [n, c], got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * n * c];
        for i in 0..n {
            for j in 0..n {
                let s = if by_row { i } else { j } * c;
                let d = (i * n + j) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, n, c], out)?, Op::PairExpand { x, by_row }, rg)
    }

    /// `out[i][j][k] = sum_l a[i][k * b + l] * tail[j][l]` with `a: [n, out * b]`, `tail: [n, b]`.
    pub fn pair_bilinear(&mut self, a: Var, tail: Var, out_channels: usize) -> Result<Var, NnError> {
        let (sa, st) = (self.shape(a).to_vec(), self.shape(tail).to_vec());
        if sa.len() != 2 || st.len() != 2 || sa[0] != st[0] || sa[1] != out_channels * st[1] {
            return Err(NnError::Shape(format!(
                "pair_bilinear: a {sa:?}, tail {st:?}, out {out_channels}"
            )));
        }
        let (n, bdim, o) = (st[0], st[1], out_channels);
        let (va, vt) = (self.value(a).data(), self.value(tail).data());
        let mut out = vec![T::zero(); n * n * o];
        for i in 0..n {
            T::gemm(
                o,
                bdim,
                n,
                T::one(),
                &va[i * o * bdim..(i + 1) * o * bdim],
                bdim as isize,
                1,
                vt,
                1,
                bdim as isize,
                T::zero(),
                &mut out[i * n * o..(i + 1) * n * o],
                1,
                o as isize,
            );
        }
        let rg = self.rg(a) || self.rg(tail);
        self.push(
            Tensor::new(vec![n, n, o], out)?,
            Op::PairBilinear { a, tail, out: o },
            rg,
        )
    }

    /// Sparse `adj · x` for `x: [nodes, c]`.
    pub fn propagate(&mut self, x: Var, adj: Arc<SparseAdjacency<T>>) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != adj.rows {
            return Err(NnError::Shape(format!(
                "propagate: features {sx:?} for {} nodes",
                adj.rows
            )));
        }
        let c = sx[1];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); adj.rows * c];
        for r in 0..adj.rows {
            let dst = &mut out[r * c..(r + 1) * c];
            for (s, wgt) in adj.row(r) {
                for (d, &v) in dst.iter_mut().zip(&src[s * c..(s + 1) * c]) {
                    *d += wgt * v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![adj.rows, c], out)?, Op::Propagate { x, adj }, rg)
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = self
            .value(*xs.first().ok_or_else(|| NnError::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(NnError::Axis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(NnError::Shape(format!("concat: {:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(NnError::Axis {
                axis,
                rank: sx.len(),
            });
        }
        if start + len > sx[axis] {
            return Err(NnError::Shape(format!(
                "narrow [{start}, {}) beyond axis {axis} of {sx:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = axis_extents(&sx, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg)
    }

    // ---- normalisation, probabilities, losses --------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(NnError::Axis {
                axis,
                rank: sx.len(),
            });
        }
        let (outer, dim, inner) = axis_extents(&sx, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * dim * inner + k * inner + i;
                let max = (0..dim).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..dim {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..dim {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(sx, out)?, Op::Softmax { x, axis }, rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| NnError::Shape("layer_norm of scalar".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NnError::Shape("layer_norm affine parameters".into()));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / c.max(1);
        let cf = T::from_usize(c).unwrap_or_else(T::one);
        let eps = T::from_f64_lossy(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                let xh = (row[k] - mean) * inv;
                xhat[r * c + k] = xh;
                out[r * c + k] = g[k] * xh + b[k];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood over unmasked rows of `logits: [rows, k]`.
    ///
    /// Returns zero when every row is masked out.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(NnError::Shape(format!(
                "cross_entropy: logits {sl:?} for {} targets",
                targets.len()
            )));
        }
        let (rows, k) = (sl[0], sl[1]);
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() != rows => {
                return Err(NnError::Shape("cross_entropy mask length".into()))
            }
            Some(m) => m.to_vec(),
            None => vec![true; rows],
        };
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            if t >= k {
                return Err(NnError::Index {
                    what: "class",
                    index: t,
                    size: k,
                });
            }
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - log_z).exp();
            }
            if mask[r] {
                total += log_z - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap_or_else(T::one)
        };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask,
                probs,
                count,
            },
            rg,
        )
    }

    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var, NnError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(NnError::Shape(format!("embedding table must be rank 2, got {st:?}")));
        }
        let (rows, dim) = (st[0], st[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(NnError::Index {
                    what: "embedding table",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![indices.len(), dim], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    // ---- reverse sweep -----------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        self.backward_scaled(loss, T::one())
    }

    /// Backward with seed `d loss = seed`.
    pub fn backward_scaled(&self, loss: Var, seed: T) -> Result<Gradients<T>, NnError> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![seed]);
        let mut leaves: Vec<Option<Vec<T>>> = Vec::new();
        leaves.resize_with(loss.0 + 1, || None);
        let mut params = ParamGrads::with_len(self.params.len());

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Param(pid) => params.add(pid.0, &g),
                op => self.backward_op(op, id, &g, &mut grads)?,
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
        f(buf);
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        id: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<(), NnError> {
        let out = self.nodes[id].value.as_ref().expect("op nodes own their value");
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * o;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * o;
                    }
                });
            }
            Op::Scale(x, alpha) => {
                self.accumulate(grads, *x, |d| {
                    for (v, &gy) in d.iter_mut().zip(g) {
                        *v += gy * *alpha;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |d| add_into(d, g));
                let c = self.value(*b).len();
                self.accumulate(grads, *b, |d| {
                    if c > 0 {
                        for chunk in g.chunks(c) {
                            add_into(d, chunk);
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (ra, ca) = op_strides(sa[1], *ta);
                let (rb, cb) = op_strides(sb[1], *tb);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                // d op(a) = g · op(b)^T, written through op(a)'s strides.
                self.accumulate(grads, *a, |d| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, vb, cb, rb, T::one(), d, ra, ca);
                });
                // d op(b) = op(a)^T · g
                self.accumulate(grads, *b, |d| {
                    T::gemm(k, m, n, T::one(), va, ca, ra, g, n as isize, 1, T::one(), d, rb, cb);
                });
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let sx = self.shape(*x);
                let (h, wd, c) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(*w)[1];
                let hw = h * wd;
                self.accumulate(grads, *w, |d| {
                    T::gemm(
                        9 * c,
                        hw,
                        cout,
                        T::one(),
                        cols,
                        1,
                        (9 * c) as isize,
                        g,
                        cout as isize,
                        1,
                        T::one(),
                        d,
                        cout as isize,
                        1,
                    );
                });
                self.accumulate(grads, *b, |d| {
                    if cout > 0 {
                        for chunk in g.chunks(cout) {
                            add_into(d, chunk);
                        }
                    }
                });
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); hw * 9 * c];
                    T::gemm(
                        hw,
                        cout,
                        9 * c,
                        T::one(),
                        g,
                        cout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        cout as isize,
                        T::zero(),
                        &mut dcols,
                        (9 * c) as isize,
                        1,
                    );
                    self.accumulate(grads, *x, |d| col2im_add(&dcols, h, wd, c, d));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |d| {
                    for (&src, &gy) in argmax.iter().zip(g) {
                        if src != usize::MAX {
                            d[src] += gy;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let sx = self.shape(*x);
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                self.accumulate(grads, *x, |d| {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let s = (i * 2 * w + j) * c;
                            let t = ((i / 2) * w + j / 2) * c;
                            add_into(&mut d[t..t + c], &g[s..s + c]);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((v, &gy), &xi) in d.iter_mut().zip(g).zip(vx) {
                        *v += gy * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * dim * inner + k * inner + i;
                            let dot: T = (0..dim).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..dim {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(*count).unwrap_or_else(T::one);
                self.accumulate(grads, *logits, |d| {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            d[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let dim = self.shape(*table)[1];
                self.accumulate(grads, *table, |d| {
                    for (row, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * dim..(i + 1) * dim], &g[row * dim..(row + 1) * dim]);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    self.accumulate(grads, x, |d| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(
                                &mut d[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = axis_extents(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        add_into(
                            &mut d[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let c = gv.len();
                self.accumulate(grads, *gamma, |d| {
                    for (gy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for k in 0..c {
                            d[k] += gy[k] * xh[k];
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for gy in g.chunks(c) {
                        add_into(d, gy);
                    }
                });
                let cf = T::from_usize(c).unwrap_or_else(T::one);
                self.accumulate(grads, *x, |d| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for k in 0..c {
                            let dxh = gy[k] * gv[k];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[k];
                        }
                        for k in 0..c {
                            let dxh = gy[k] * gv[k];
                            d[r * c + k] += *inv / cf * (cf * dxh - sum_dxh - xh[k] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |d| {
                    for ((v, &gy), &m) in d.iter_mut().zip(g).zip(mask) {
                        *v += gy * m;
                    }
                });
            }
            Op::PairExpand { x, by_row } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                self.accumulate(grads, *x, |d| {
                    for i in 0..n {
                        for j in 0..n {
                            let t = if *by_row { i } else { j } * c;
                            let s = (i * n + j) * c;
                            add_into(&mut d[t..t + c], &g[s..s + c]);
                        }
                    }
                });
            }
            Op::ResizeTable(x) => {
                let sx = self.shape(*x);
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                let (nh, nw) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *x, |d| {
                    for i in 0..h.min(nh) {
                        for j in 0..w.min(nw) {
                            let t = (i * w + j) * c;
                            let s = (i * nw + j) * c;
                            add_into(&mut d[t..t + c], &g[s..s + c]);
                        }
                    }
                });
            }
            Op::MaskCells { x, valid_h, valid_w } => {
                let sx = self.shape(*x);
                let (w, c) = (sx[1], sx[2]);
                self.accumulate(grads, *x, |d| {
                    for (cell, (dc, gc)) in d.chunks_mut(c.max(1)).zip(g.chunks(c.max(1))).enumerate() {
                        if cell / w < *valid_h && cell % w < *valid_w {
                            add_into(dc, gc);
                        }
                    }
                });
            }
            Op::Propagate { x, adj } => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |d| {
                    for r in 0..adj.rows {
                        let gy = &g[r * c..(r + 1) * c];
                        for (s, wgt) in adj.row(r) {
                            for (v, &gv) in d[s * c..(s + 1) * c].iter_mut().zip(gy) {
                                *v += wgt * gv;
                            }
                        }
                    }
                });
            }
            Op::PairBilinear { a, tail, out: o } => {
                let st = self.shape(*tail);
                let (n, bdim, o) = (st[0], st[1], *o);
                let va = self.value(*a).data();
                let vt = self.value(*tail).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..n {
                        T::gemm(
                            o,
                            n,
                            bdim,
                            T::one(),
                            &g[i * n * o..(i + 1) * n * o],
                            1,
                            o as isize,
                            vt,
                            bdim as isize,
                            1,
                            T::one(),
                            &mut d[i * o * bdim..(i + 1) * o * bdim],
                            bdim as isize,
                            1,
                        );
                    }
                });
                self.accumulate(grads, *tail, |d| {
                    for i in 0..n {
                        T::gemm(
                            n,
                            o,
                            bdim,
                            T::one(),
                            &g[i * n * o..(i + 1) * n * o],
                            o as isize,
                            1,
                            &va[i * o * bdim..(i + 1) * o * bdim],
                            bdim as isize,
                            1,
                            T::one(),
                            d,
                            bdim as isize,
                            1,
                        );
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
