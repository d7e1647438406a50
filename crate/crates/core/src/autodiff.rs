//! Define-by-run reverse-mode automatic differentiation over [`Tensor2`].
//!
//! A [`Tape`] owns every node created during one forward pass. Nodes are
//! appended in evaluation order, so the node vector is already a topological
//! order and [`Tape::backward`] simply walks it in reverse. Each node stores
//! its value, an accumulated gradient and the rule that maps the output
//! gradient to its parents.
//!
//! ```
//! use prm_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), tape.value(w));
//! ```

use crate::error::{PrmError, Result};
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::tensor::{gemm_nt_acc, gemm_tn_acc, Tensor2};

use rand::Rng as _;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-entry boolean mask: `true` keeps the entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(PrmError::Dimension {
                op: "mask",
                lhs: (rows, cols),
                rhs: (keep.len(), 1),
            });
        }
        Ok(Self { rows, cols, keep })
    }

    /// Mask for an attention logit matrix where every query row may look at
    /// the keys marked valid.
    pub fn keys(rows: usize, valid: &[bool]) -> Self {
        let cols = valid.len();
        let mut keep = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            keep.extend_from_slice(valid);
        }
        Self { rows, cols, keep }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }
}

/// Pointwise activations and unary maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Relu,
    Sigmoid,
    Scale(T),
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Dropout(usize, Tensor2<T>),
    Softmax(usize),
    LogSoftmax(usize, Option<Mask>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor2<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Bce {
        p: usize,
        labels: Vec<T>,
        lo: T,
        hi: T,
    },
}

struct Node<T> {
    value: Tensor2<T>,
    grad: Option<Tensor2<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> PrmError {
    PrmError::Dimension { op, lhs, rhs }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor2<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, `None` if backward never reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor2<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = av.matmul(bv)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a.0);
        self.push(value, Op::Transpose(a.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av.shape(), bv.shape()));
        }
        let value = av.zip_map(bv, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    /// `a + 1·bias`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(dim_err("add_row", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(bias.0);
        Ok(self.push(value, Op::AddRow(a.0, bias.0), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av.shape(), bv.shape()));
        }
        let value = av.zip_map(bv, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a.0);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn elementwise(&mut self, a: Var, kind: Elementwise<T>) -> Var {
        match kind {
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Scale(c) => self.scale(a, c),
        }
    }

    /// Inverted dropout. With `training == false` (or `p == 0`) the input is
    /// returned unchanged and no node is recorded.
    pub fn dropout(&mut self, a: Var, p: T, training: bool, key: DropoutKey) -> Result<Var> {
        if !(p >= T::zero() && p < T::one()) {
            return Err(PrmError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == T::zero() {
            return Ok(a);
        }
        let mut rng = key.rng();
        let keep_scale = T::one() / (T::one() - p);
        let pf = p.to_f64_lossy();
        let (r, c) = self.shape(a);
        let mut mask = Tensor2::zeros(r, c);
        for m in mask.data_mut() {
            let u: f64 = rng.random();
            *m = if u < pf { T::zero() } else { keep_scale };
        }
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Dropout(a.0, mask), rg))
    }

    /// Row-wise softmax with per-row max subtraction. Masked entries are
    /// exactly zero and every row needs at least one kept entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = softmax_rows(self.value(a), mask)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    /// Row-wise log-softmax; masked entries are set to zero.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let av = self.value(a);
        check_mask(av, mask)?;
        let mut value = av.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let kept = |j: usize| mask.is_none_or(|m| m.keep(i, j));
            let mut mx = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if kept(j) && x > mx {
                    mx = x;
                }
            }
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if kept(j) {
                    z += (x - mx).exp();
                }
            }
            let lse = mx + z.ln();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if kept(j) { *x - lse } else { T::zero() };
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::LogSoftmax(a.0, mask.cloned()), rg))
    }

    /// Per-row layer normalization followed by `gain ∘ x̂ + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, epsilon: T) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.shape();
        for v in [gain, bias] {
            let s = self.shape(v);
            if s != (1, n) {
                return Err(dim_err("layer_norm", (m, n), s));
            }
        }
        if n == 0 {
            return Err(PrmError::Parameter("layer_norm needs n >= 1".into()));
        }
        let nf = T::of_usize(n);
        let mut xhat = Tensor2::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = av.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let is = T::one() / (var + epsilon).sqrt();
            inv_std.push(is);
            for (o, &x) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut value = xhat.clone();
        for i in 0..m {
            for (j, x) in value.row_mut(i).iter_mut().enumerate() {
                *x = *x * g[j] + b[j];
            }
        }
        let rg = self.rg(a.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: a.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| PrmError::Contract("concat of zero tensors".into()))?;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(dim_err("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut value = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for i in 0..rows {
                value.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatCols(ids), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.0 {
            return Err(dim_err("slice_rows", s, (start, len)));
        }
        let value = self.value(a).slice_rows(start, len);
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::SliceRows(a.0, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.1 {
            return Err(dim_err("slice_cols", s, (start, len)));
        }
        let value = self.value(a).slice_cols(start, len);
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::SliceCols(a.0, start), rg))
    }

    /// Row lookup `table[indices[k], :]`, the embedding primitive.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = tv.shape();
        let mut value = Tensor2::zeros(indices.len(), c);
        for (k, &idx) in indices.iter().enumerate() {
            if idx >= r {
                return Err(dim_err("gather_rows", (r, c), (idx, 0)));
            }
            value.row_mut(k).copy_from_slice(tv.row(idx));
        }
        let rg = self.rg(table.0);
        Ok(self.push(value, Op::Gather(table.0, indices.to_vec()), rg))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let rg = self.rg(a.0);
        self.push(value, Op::Sum(a.0), rg)
    }

    /// Summed binary cross entropy `-Σ y ln p + (1-y) ln(1-p)` over the
    /// entries of a column of probabilities, with `p` clamped to
    /// `[1e-12, 1 - 1e-12]` before the logs.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(dim_err("binary_cross_entropy", pv.shape(), (labels.len(), 1)));
        }
        let lo = T::of(1e-12);
        let hi = T::one() - lo;
        let mut total = T::zero();
        for (&x, &y) in pv.data().iter().zip(labels) {
            let c = x.max(lo).min(hi);
            total -= y * c.ln() + (T::one() - y) * (T::one() - c).ln();
        }
        let rg = self.rg(p.0);
        Ok(self.push(
            Tensor2::scalar(total),
            Op::Bce {
                p: p.0,
                labels: labels.to_vec(),
                lo,
                hi,
            },
            rg,
        ))
    }

    /// Propagates `∂loss/∂node` into every node that requires a gradient.
    ///
    /// Gradients accumulate: calling `backward` twice without
    /// [`Tape::zero_grad`] doubles every stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(PrmError::Contract(format!(
                "backward needs a 1x1 loss, got {shape:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut local: Vec<Option<Tensor2<T>>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(Tensor2::scalar(T::one()));
        for idx in (0..n).rev() {
            let Some(g) = local[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut local);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor2<T>, local: &mut [Option<Tensor2<T>>]) {
        let nodes = &self.nodes;
        let mut send = |target: usize, contrib: Tensor2<T>| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut local[target] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |i: usize| &nodes[i].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if nodes[*a].requires_grad {
                    let mut ga = Tensor2::zeros(val(*a).rows(), val(*a).cols());
                    gemm_nt_acc(g, val(*b), &mut ga);
                    send(*a, ga);
                }
                if nodes[*b].requires_grad {
                    let mut gb = Tensor2::zeros(val(*b).rows(), val(*b).cols());
                    gemm_tn_acc(val(*a), g, &mut gb);
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                let mut gb = Tensor2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                send(*b, gb);
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, g.map(|x| x * c));
            }
            Op::Relu(a) => send(
                *a,
                g.zip_map(val(*a), |x, y| if y > T::zero() { x } else { T::zero() }),
            ),
            Op::Sigmoid(a) => {
                let out = val(idx);
                send(*a, g.zip_map(out, |x, s| x * s * (T::one() - s)));
            }
            Op::Dropout(a, mask) => send(*a, g.zip_map(mask, |x, m| x * m)),
            Op::Softmax(a) => {
                let y = val(idx);
                let mut ga = Tensor2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, (&p, &q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a, mask) => {
                let y = val(idx);
                let mut ga = Tensor2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let kept = |j: usize| mask.as_ref().is_none_or(|m| m.keep(i, j));
                    let gr = g.row(i);
                    let gsum: T = (0..y.cols()).filter(|&j| kept(j)).map(|j| gr[j]).sum();
                    let yr = y.row(i);
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        if kept(j) {
                            *o = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = xhat.shape();
                let gv = val(*gain).data();
                if nodes[*x].requires_grad {
                    let nf = T::of_usize(n);
                    let mut gx = Tensor2::zeros(m, n);
                    for i in 0..m {
                        let (gr, xr) = (g.row(i), xhat.row(i));
                        let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[i] / nf;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = k * (nf * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    send(*x, gx);
                }
                let mut gg = Tensor2::zeros(1, n);
                let mut gb = Tensor2::zeros(1, n);
                for i in 0..m {
                    for j in 0..n {
                        gg.data_mut()[j] += g[(i, j)] * xhat[(i, j)];
                        gb.data_mut()[j] += g[(i, j)];
                    }
                }
                send(*gain, gg);
                send(*bias, gb);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if nodes[p].requires_grad {
                        send(p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                send(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    ga.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                send(*a, ga);
            }
            Op::Gather(t, indices) => {
                let (r, c) = val(*t).shape();
                let mut gt = Tensor2::zeros(r, c);
                for (k, &row) in indices.iter().enumerate() {
                    for (o, &x) in gt.row_mut(row).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                send(*t, gt);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Tensor2::filled(r, c, g.item()));
            }
            Op::Bce { p, labels, lo, hi } => {
                let up = g.item();
                let pv = val(*p);
                let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                for ((o, &x), &y) in gp.data_mut().iter_mut().zip(pv.data()).zip(labels) {
                    if x > *lo && x < *hi {
                        *o = up * ((T::one() - y) / (T::one() - x) - y / x);
                    }
                }
                send(*p, gp);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_mask<T: Scalar>(a: &Tensor2<T>, mask: Option<&Mask>) -> Result<()> {
    if let Some(m) = mask {
        if m.shape() != a.shape() {
            return Err(dim_err("mask", a.shape(), m.shape()));
        }
        for i in 0..m.rows {
            if !(0..m.cols).any(|j| m.keep(i, j)) {
                return Err(PrmError::InvalidMask(format!("row {i} is fully masked")));
            }
        }
    } else if a.cols() == 0 {
        return Err(PrmError::InvalidMask("softmax over zero columns".into()));
    }
    Ok(())
}

/// Plain (non-recording) masked row softmax.
pub fn softmax_rows<T: Scalar>(a: &Tensor2<T>, mask: Option<&Mask>) -> Result<Tensor2<T>> {
    check_mask(a, mask)?;
    let mut value = a.clone();
    for i in 0..value.rows() {
        let row = value.row_mut(i);
        let kept = |j: usize| mask.is_none_or(|m| m.keep(i, j));
        let mut mx = T::neg_infinity();
        for (j, &x) in row.iter().enumerate() {
            if kept(j) && x > mx {
                mx = x;
            }
        }
        let mut z = T::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if kept(j) {
                *x = (*x - mx).exp();
                z += *x;
            } else {
                *x = T::zero();
            }
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    Ok(value)
}

#[cfg(test)]
#[path = "../tests/common/gradcheck.rs"]
pub(crate) mod gradcheck;
