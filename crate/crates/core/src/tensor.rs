//! Reverse-mode automatic differentiation over dense row-major f64 matrices.
//!
//! A [`Tape`] records every operation; [`Var`] handles index into it. Node
//! ids grow monotonically and an op's inputs always precede it, so walking
//! ids in reverse is a valid topological order for backpropagation. Leaves
//! registered through [`Tape::constant`] are frozen: no gradient is stored
//! for them. Fan-out is handled by accumulation, so reusing a `Var` any
//! number of times is safe.

use std::rc::Rc;

use crate::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Tensor { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    MatMul(usize, usize),
    /// a @ b^T, used for attention logits without materializing transposes.
    MatMulNT(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sqrt(usize),
    /// Row-wise softmax of `scale * logits + mask`. Entries where the sum is
    /// -inf get probability exactly 0.
    MaskedSoftmax { logits: usize, mask: usize, scale: f64 },
    /// Row-wise layer normalization with learnable gain and bias (1 x cols).
    LayerNorm { x: usize, gain: usize, bias: usize },
    /// Scatter an (E x 1) value column into an (n x n) matrix, accumulating
    /// at the given positions. Backward gathers.
    Scatter { values: usize, positions: Rc<Vec<(usize, usize)>>, n: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Frozen leaves (constants) receive no gradient storage.
    no_grad: bool,
}

/// Gradients keyed by tape node id, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows, a.cols);
    let n = b.cols;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// a @ b^T without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows, a.cols);
    let n = b.rows;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            orow[j] = s;
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// a^T @ b without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows, a.cols);
    let n = b.cols;
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, &bij) in orow.iter_mut().zip(brow) {
                    *o += aik * bij;
                }
            }
        }
    }
    Tensor { rows: k, cols: n, data: out }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.id].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        debug_assert!(self.nodes[var.id].value.is_scalar());
        self.nodes[var.id].value.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor, no_grad: bool) -> Var {
        let var = Var { id: self.nodes.len(), rows: value.rows, cols: value.cols };
        self.nodes.push(Node { op, value, no_grad });
        var
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Frozen leaf: participates in the forward pass, gets no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    fn broadcast_ok(a: Var, b: Var) -> bool {
        a.cols == b.cols && (a.rows == b.rows || b.rows == 1)
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !Self::broadcast_ok(a, b) {
            return Err(Error::ShapeMismatch { op: "add", a: a.shape(), b: b.shape() });
        }
        let (ta, tb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let mut out = ta.clone();
        if b.rows == a.rows {
            for (o, &y) in out.data.iter_mut().zip(&tb.data) {
                *o += y;
            }
        } else {
            for r in 0..a.rows {
                for c in 0..a.cols {
                    out.data[r * a.cols + c] += tb.data[c];
                }
            }
        }
        Ok(self.push(Op::Add(a.id, b.id), out, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch { op: "sub", a: a.shape(), b: b.shape() });
        }
        let (ta, tb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let mut out = ta.clone();
        for (o, &y) in out.data.iter_mut().zip(&tb.data) {
            *o -= y;
        }
        Ok(self.push(Op::Sub(a.id, b.id), out, false))
    }

    /// Elementwise product; `b` may be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !Self::broadcast_ok(a, b) {
            return Err(Error::ShapeMismatch { op: "mul", a: a.shape(), b: b.shape() });
        }
        let (ta, tb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let mut out = ta.clone();
        if b.rows == a.rows {
            for (o, &y) in out.data.iter_mut().zip(&tb.data) {
                *o *= y;
            }
        } else {
            for r in 0..a.rows {
                for c in 0..a.cols {
                    out.data[r * a.cols + c] *= tb.data[c];
                }
            }
        }
        Ok(self.push(Op::Mul(a.id, b.id), out, false))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let ta = &self.nodes[a.id].value;
        let mut out = ta.clone();
        for o in out.data.iter_mut() {
            *o *= s;
        }
        self.push(Op::ScalarMul(a.id, s), out, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::ShapeMismatch { op: "matmul", a: a.shape(), b: b.shape() });
        }
        let out = matmul_raw(&self.nodes[a.id].value, &self.nodes[b.id].value);
        Ok(self.push(Op::MatMul(a.id, b.id), out, false))
    }

    /// a @ b^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(Error::ShapeMismatch { op: "matmul_nt", a: a.shape(), b: b.shape() });
        }
        let out = matmul_nt(&self.nodes[a.id].value, &self.nodes[b.id].value);
        Ok(self.push(Op::MatMulNT(a.id, b.id), out, false))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.id].value;
        let mut out = Tensor::zeros(ta.cols, ta.rows);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out.data[c * ta.rows + r] = ta.data[r * ta.cols + c];
            }
        }
        self.push(Op::Transpose(a.id), out, false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|v| v.rows).unwrap_or(0);
        for v in parts {
            if v.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    a: (rows, 0),
                    b: v.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|v| v.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for v in parts {
            let tv = &self.nodes[v.id].value;
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols]
                    .copy_from_slice(&tv.data[r * v.cols..(r + 1) * v.cols]);
            }
            off += v.cols;
        }
        Ok(self.push(Op::ConcatCols(parts.iter().map(|v| v.id).collect()), out, false))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|v| v.cols).unwrap_or(0);
        for v in parts {
            if v.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    a: (0, cols),
                    b: v.shape(),
                });
            }
        }
        let rows: usize = parts.iter().map(|v| v.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in parts {
            data.extend_from_slice(&self.nodes[v.id].value.data);
        }
        let out = Tensor { rows, cols, data };
        Ok(self.push(Op::ConcatRows(parts.iter().map(|v| v.id).collect()), out, false))
    }

    /// Columns [from, to) of `a`.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        if from >= to || to > a.cols {
            return Err(Error::ShapeMismatch { op: "slice_cols", a: a.shape(), b: (from, to) });
        }
        let ta = &self.nodes[a.id].value;
        let w = to - from;
        let mut out = Tensor::zeros(a.rows, w);
        for r in 0..a.rows {
            out.data[r * w..(r + 1) * w]
                .copy_from_slice(&ta.data[r * a.cols + from..r * a.cols + to]);
        }
        Ok(self.push(Op::SliceCols(a.id, from), out, false))
    }

    /// Rows [from, to) of `a`.
    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        if from >= to || to > a.rows {
            return Err(Error::ShapeMismatch { op: "slice_rows", a: a.shape(), b: (from, to) });
        }
        let ta = &self.nodes[a.id].value;
        let out = Tensor {
            rows: to - from,
            cols: a.cols,
            data: ta.data[from * a.cols..to * a.cols].to_vec(),
        };
        Ok(self.push(Op::SliceRows(a.id, from), out, false))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.id].value.data.iter().sum();
        self.push(Op::Sum(a.id), Tensor::scalar(s), false)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.id].value;
        let s: f64 = t.data.iter().sum();
        let m = s / t.data.len() as f64;
        self.push(Op::Mean(a.id), Tensor::scalar(m), false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = &self.nodes[a.id].value;
        let mut out = ta.clone();
        for o in out.data.iter_mut() {
            *o = f(*o);
        }
        self.push(op, out, false)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.id), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.id), f64::tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a.id), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a.id), f64::cos)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.id), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.id), f64::sqrt)
    }

    /// Row-wise softmax of `scale * logits + mask`. Additive-mask semantics:
    /// a mask entry of -inf removes the slot (probability exactly 0). A row
    /// whose entries are all masked is an error.
    pub fn masked_softmax(&mut self, logits: Var, mask: Var, scale: f64) -> Result<Var> {
        if logits.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                a: logits.shape(),
                b: mask.shape(),
            });
        }
        let (tl, tm) = (&self.nodes[logits.id].value, &self.nodes[mask.id].value);
        let (rows, cols) = (logits.rows, logits.cols);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let lrow = &tl.data[r * cols..(r + 1) * cols];
            let mrow = &tm.data[r * cols..(r + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for (l, m) in lrow.iter().zip(mrow) {
                let z = scale * l + m;
                if z > mx {
                    mx = z;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let orow = &mut out.data[r * cols..(r + 1) * cols];
            let mut denom = 0.0;
            for (o, (l, m)) in orow.iter_mut().zip(lrow.iter().zip(mrow)) {
                let z = scale * l + m;
                let e = if z == f64::NEG_INFINITY { 0.0 } else { (z - mx).exp() };
                *o = e;
                denom += e;
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        Ok(self.push(Op::MaskedSoftmax { logits: logits.id, mask: mask.id, scale }, out, false))
    }

    /// Row-wise layer normalization: y = gain * (x - mu) / sqrt(var + eps) + bias.
    /// `gain` and `bias` are single rows with `x.cols` entries.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        if gain.shape() != (1, x.cols) || bias.shape() != (1, x.cols) {
            return Err(Error::ShapeMismatch { op: "layer_norm", a: x.shape(), b: gain.shape() });
        }
        let (tx, tg, tb) = (
            &self.nodes[x.id].value,
            &self.nodes[gain.id].value,
            &self.nodes[bias.id].value,
        );
        let (rows, cols) = (x.rows, x.cols);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let xr = &tx.data[r * cols..(r + 1) * cols];
            let mu = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let orow = &mut out.data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                orow[c] = tg.data[c] * (xr[c] - mu) * inv + tb.data[c];
            }
        }
        Ok(self.push(Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id }, out, false))
    }

    /// Scatter an (E x 1) column into an (n x n) matrix, accumulating values
    /// at `positions[k]` for row k of `values`. Zeros elsewhere.
    pub fn scatter_matrix(
        &mut self,
        values: Var,
        positions: Rc<Vec<(usize, usize)>>,
        n: usize,
    ) -> Result<Var> {
        if values.cols != 1 || values.rows != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_matrix",
                a: values.shape(),
                b: (positions.len(), 1),
            });
        }
        let tv = &self.nodes[values.id].value;
        let mut out = Tensor::zeros(n, n);
        for (k, &(r, c)) in positions.iter().enumerate() {
            debug_assert!(r < n && c < n);
            out.data[r * n + c] += tv.data[k];
        }
        Ok(self.push(Op::Scatter { values: values.id, positions, n }, out, false))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; frozen
    /// leaves are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.id].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss { shape: lt.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop_node(node, &g, &mut grads);
            // Leaves keep their gradient; interior nodes may be queried too,
            // so restore it rather than dropping.
            grads[id] = Some(g);
        }
        // Strip gradients from frozen leaves and interior nodes not needed?
        // Frozen leaves never had storage; nothing else to strip.
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, add: impl FnOnce(&mut Tensor)) {
        if self.nodes[target].no_grad {
            return;
        }
        let t = &self.nodes[target].value;
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(t.rows, t.cols));
        }
        add(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
                let bt = self.nodes[*b].value.shape();
                self.accumulate(grads, *b, |gb| {
                    if bt.0 == g.rows {
                        for (x, &y) in gb.data.iter_mut().zip(&g.data) {
                            *x += y;
                        }
                    } else {
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                gb.data[c] += g.data[r * g.cols + c];
                            }
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, &y) in gb.data.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |ga| {
                    if tb.rows == g.rows {
                        for ((x, &y), &z) in ga.data.iter_mut().zip(&g.data).zip(&tb.data) {
                            *x += y * z;
                        }
                    } else {
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                ga.data[r * g.cols + c] += g.data[r * g.cols + c] * tb.data[c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    if tb.rows == g.rows {
                        for ((x, &y), &z) in gb.data.iter_mut().zip(&g.data).zip(&ta.data) {
                            *x += y * z;
                        }
                    } else {
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                gb.data[c] += g.data[r * g.cols + c] * ta.data[r * g.cols + c];
                            }
                        }
                    }
                });
            }
            Op::ScalarMul(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.data.iter_mut().zip(&g.data) {
                        *x += s * y;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = matmul_nt(g, tb);
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.data.iter_mut().zip(&da.data) {
                        *x += y;
                    }
                });
                let db = matmul_tn(ta, g);
                self.accumulate(grads, *b, |gb| {
                    for (x, &y) in gb.data.iter_mut().zip(&db.data) {
                        *x += y;
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                // c = a @ b^T: da = g @ b, db = g^T @ a.
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = matmul_raw(g, tb);
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.data.iter_mut().zip(&da.data) {
                        *x += y;
                    }
                });
                let db = matmul_tn(g, ta);
                self.accumulate(grads, *b, |gb| {
                    for (x, &y) in gb.data.iter_mut().zip(&db.data) {
                        *x += y;
                    }
                });
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, |ga| {
                    // ga is (r x c), g is (c x r).
                    for r in 0..ga.rows {
                        for c in 0..ga.cols {
                            ga.data[r * ga.cols + c] += g.data[c * g.cols + r];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols;
                    self.accumulate(grads, p, |gp| {
                        for r in 0..gp.rows {
                            for c in 0..w {
                                gp.data[r * w + c] += g.data[r * g.cols + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows;
                    let cols = self.nodes[p].value.cols;
                    self.accumulate(grads, p, |gp| {
                        for (x, &y) in gp
                            .data
                            .iter_mut()
                            .zip(&g.data[off * cols..(off + rows) * cols])
                        {
                            *x += y;
                        }
                    });
                    off += rows;
                }
            }
            Op::SliceCols(a, from) => {
                let from = *from;
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * ga.cols + from + c] += g.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::SliceRows(a, from) => {
                let from = *from;
                self.accumulate(grads, *a, |ga| {
                    let cols = ga.cols;
                    for (x, &y) in ga.data[from * cols..from * cols + g.data.len()]
                        .iter_mut()
                        .zip(&g.data)
                    {
                        *x += y;
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g.data[0];
                self.accumulate(grads, *a, |ga| {
                    for x in ga.data.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.data.len() as f64;
                let gs = g.data[0] / n;
                self.accumulate(grads, *a, |ga| {
                    for x in ga.data.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &yy) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += gy * yy;
                    }
                });
            }
            Op::Log(a) => {
                let ta = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &xx) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *x += gy / xx;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &yy) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += gy * (1.0 - yy * yy);
                    }
                });
            }
            Op::Sin(a) => {
                let ta = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &xx) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *x += gy * xx.cos();
                    }
                });
            }
            Op::Cos(a) => {
                let ta = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &xx) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *x -= gy * xx.sin();
                    }
                });
            }
            Op::Square(a) => {
                let ta = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &xx) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *x += 2.0 * gy * xx;
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gy), &yy) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += gy / (2.0 * yy);
                    }
                });
            }
            Op::MaskedSoftmax { logits, mask, scale } => {
                let p = &node.value;
                let (rows, cols) = p.shape();
                // Shared row statistic: dot_r = sum_j p_rj g_rj.
                let mut dots = vec![0.0; rows];
                for r in 0..rows {
                    let mut d = 0.0;
                    for c in 0..cols {
                        d += p.data[r * cols + c] * g.data[r * cols + c];
                    }
                    dots[r] = d;
                }
                let scale = *scale;
                self.accumulate(grads, *logits, |gl| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gl.data[idx] += scale * p.data[idx] * (g.data[idx] - dots[r]);
                        }
                    }
                });
                self.accumulate(grads, *mask, |gm| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gm.data[idx] += p.data[idx] * (g.data[idx] - dots[r]);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let (rows, cols) = tx.shape();
                let cn = cols as f64;
                // Recompute per-row statistics (cheap at these sizes).
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let xr = &tx.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let mu = xr.iter().sum::<f64>() / cn;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cn;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (xr[c] - mu) * inv;
                        let dxhat = gr[c] * tg.data[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                    }
                    for c in 0..cols {
                        let xhat = (xr[c] - mu) * inv;
                        let dxhat = gr[c] * tg.data[c];
                        dx.data[r * cols + c] +=
                            inv * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
                    }
                }
                self.accumulate(grads, *x, |gx| {
                    for (a, &b) in gx.data.iter_mut().zip(&dx.data) {
                        *a += b;
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (a, &b) in gg.data.iter_mut().zip(&dgain) {
                        *a += b;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (a, &b) in gb.data.iter_mut().zip(&dbias) {
                        *a += b;
                    }
                });
            }
            Op::Scatter { values, positions, n } => {
                let n = *n;
                self.accumulate(grads, *values, |gv| {
                    for (k, &(r, c)) in positions.iter().enumerate() {
                        gv.data[k] += g.data[r * n + c];
                    }
                });
            }
        }
    }
}

/// Compares tape gradients of a scalar-valued function against central finite
/// differences. Returns the maximum relative error
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|) over all input coordinates.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::BadStepSize(eps));
    }
    let eval = |f: &mut F, xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar { op: "grad_check", shape: v.shape() });
        }
        Ok(v.data[0])
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zero;
        let ad = match grads.get(*var) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(var.rows, var.cols);
                &zero
            }
        };
        for j in 0..xs[i].data.len() {
            let orig = xs[i].data[j];
            xs[i].data[j] = orig + eps;
            let fp = eval(&mut f, &xs)?;
            xs[i].data[j] = orig - eps;
            let fm = eval(&mut f, &xs)?;
            xs[i].data[j] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (ad.data[j] - fd).abs() / 1e-8f64.max(ad.data[j].abs() + fd.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
    }

    #[test]
    fn matmul_forward_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::from_vec(2, 1, vec![5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![17.0, 39.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 2));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("(2, 3)") && msg.contains("(2, 2)"), "{msg}");
        assert!(tape.add(a, b).is_err());
        assert!(tape.sub(a, b).is_err());
        let tall = tape.leaf(Tensor::zeros(3, 1));
        assert!(tape.concat_cols(&[a, tall]).is_err());
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
        let m = tape.constant(Tensor::from_vec(1, 3, vec![0.0, f64::NEG_INFINITY, 0.0]));
        let p = tape.masked_softmax(l, m, 1.0).unwrap();
        assert_eq!(tape.value(p).data, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let m = tape.constant(Tensor::from_vec(1, 2, vec![f64::NEG_INFINITY; 2]));
        assert!(matches!(
            tape.masked_softmax(l, m, 1.0),
            Err(Error::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let l = tape.leaf(randt(&mut rng, 5, 7));
        let mut mask = Tensor::zeros(5, 7);
        for v in mask.data.iter_mut() {
            if rng.gen_bool(0.4) {
                *v = f64::NEG_INFINITY;
            }
        }
        mask.data[0] = 0.0; // keep every row alive
        for r in 0..5 {
            mask.data[r * 7] = 0.0;
        }
        let m = tape.constant(mask);
        let p = tape.masked_softmax(l, m, 0.7).unwrap();
        let pv = tape.value(p);
        for r in 0..5 {
            let s: f64 = pv.data[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(a, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data, vec![3.0]);
    }

    #[test]
    fn fanout_accumulates_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        let r = grad_check(
            |tape, xs| Ok(tape.sum(xs[0])),
            &[Tensor::scalar(1.0)],
            0.0,
        );
        assert!(matches!(r, Err(Error::BadStepSize(_))));
    }

    /// Per-primitive randomized gradient checks, all expected under 1e-6.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eps = 1e-5;
        let tol = 1e-6;

        // add with broadcast, sub, mul with broadcast, scalar_mul.
        let a = randt(&mut rng, 3, 4);
        let b = randt(&mut rng, 3, 4);
        let row = randt(&mut rng, 1, 4);
        let e = grad_check(
            |t, xs| {
                let s = t.add(xs[0], xs[1])?;
                let s = t.add(s, xs[2])?;
                let m = t.mul(s, xs[1])?;
                let m = t.mul(m, xs[2])?;
                let m = t.scalar_mul(m, 0.73);
                Ok(t.sum(m))
            },
            &[a.clone(), b.clone(), row.clone()],
            eps,
        )
        .unwrap();
        assert!(e < tol, "add/mul/scalar_mul: {e}");

        let e = grad_check(
            |t, xs| {
                let d = t.sub(xs[0], xs[1])?;
                let d = t.square(d);
                Ok(t.sum(d))
            },
            &[a.clone(), b.clone()],
            eps,
        )
        .unwrap();
        assert!(e < tol, "sub: {e}");

        // matmul + transpose.
        let w = randt(&mut rng, 4, 2);
        let e = grad_check(
            |t, xs| {
                let wt = t.transpose(xs[1]);
                let wtt = t.transpose(wt);
                let y = t.matmul(xs[0], wtt)?;
                Ok(t.sum(y))
            },
            &[a.clone(), w.clone()],
            eps,
        )
        .unwrap();
        assert!(e < tol, "matmul/transpose: {e}");

        // matmul_nt agrees with matmul over an explicit transpose.
        let u = randt(&mut rng, 3, 5);
        let v = randt(&mut rng, 2, 5);
        let e = grad_check(
            |t, xs| {
                let y = t.matmul_nt(xs[0], xs[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &[u.clone(), v.clone()],
            eps,
        )
        .unwrap();
        assert!(e < tol, "matmul_nt: {e}");
        {
            let mut tape = Tape::new();
            let a = tape.leaf(u.clone());
            let b = tape.leaf(v.clone());
            let y1 = tape.matmul_nt(a, b).unwrap();
            let bt = tape.transpose(b);
            let y2 = tape.matmul(a, bt).unwrap();
            assert_eq!(tape.value(y1).data, tape.value(y2).data);
        }

        // concat + slice.
        let e = grad_check(
            |t, xs| {
                let cc = t.concat_cols(&[xs[0], xs[1]])?;
                let cr = t.concat_rows(&[cc, cc])?;
                let s1 = t.slice_cols(cr, 1, 5)?;
                let s2 = t.slice_rows(s1, 0, 4)?;
                let sq = t.square(s2);
                Ok(t.mean(sq))
            },
            &[a.clone(), b.clone()],
            eps,
        )
        .unwrap();
        assert!(e < tol, "concat/slice: {e}");

        // exp, log, tanh, sin, cos, square, sqrt on safe ranges.
        let pos = Tensor::from_vec(2, 3, (0..6).map(|i| 0.5 + 0.3 * i as f64).collect());
        let e = grad_check(
            |t, xs| {
                let a = t.exp(xs[0]);
                let b = t.log(xs[0]);
                let c = t.tanh(xs[0]);
                let d = t.sin(xs[0]);
                let f = t.cos(xs[0]);
                let g = t.sqrt(xs[0]);
                let h = t.square(xs[0]);
                let s1 = t.add(a, b)?;
                let s2 = t.add(c, d)?;
                let s3 = t.add(f, g)?;
                let s4 = t.add(s1, s2)?;
                let s5 = t.add(s3, h)?;
                let s = t.add(s4, s5)?;
                Ok(t.mean(s))
            },
            &[pos],
            eps,
        )
        .unwrap();
        assert!(e < tol, "unary ops: {e}");

        // sum and mean.
        let e = grad_check(
            |t, xs| {
                let s = t.sum(xs[0]);
                let m = t.mean(xs[1]);
                t.add(s, m)
            },
            &[a.clone(), b.clone()],
            eps,
        )
        .unwrap();
        assert!(e < tol, "sum/mean: {e}");

        // masked softmax, including -inf slots and a scale factor.
        let logits = randt(&mut rng, 3, 5);
        let mut mvals = Tensor::zeros(3, 5);
        mvals.data[1] = f64::NEG_INFINITY;
        mvals.data[7] = f64::NEG_INFINITY;
        mvals.data[13] = f64::NEG_INFINITY;
        let bias = randt(&mut rng, 3, 5);
        let e = grad_check(
            |t, xs| {
                let mconst = t.constant(mvals.clone());
                let mask = t.add(xs[1], mconst)?;
                let p = t.masked_softmax(xs[0], mask, 0.5)?;
                let w = t.square(p);
                Ok(t.sum(w))
            },
            &[logits, bias],
            eps,
        )
        .unwrap();
        assert!(e < tol, "masked softmax: {e}");

        // layer norm.
        let x = randt(&mut rng, 4, 6);
        let gain = randt(&mut rng, 1, 6);
        let bias = randt(&mut rng, 1, 6);
        let e = grad_check(
            |t, xs| {
                let y = t.layer_norm(xs[0], xs[1], xs[2])?;
                let y = t.square(y);
                Ok(t.mean(y))
            },
            &[x, gain, bias],
            eps,
        )
        .unwrap();
        assert!(e < tol, "layer_norm: {e}");

        // scatter.
        let vals = randt(&mut rng, 4, 1);
        let pos = Rc::new(vec![(0usize, 1usize), (1, 0), (1, 2), (2, 2)]);
        let e = grad_check(
            |t, xs| {
                let m = t.scatter_matrix(xs[0], pos.clone(), 3)?;
                let m = t.square(m);
                Ok(t.sum(m))
            },
            &[vals],
            eps,
        )
        .unwrap();
        assert!(e < tol, "scatter: {e}");
    }

    #[test]
    fn composite_chain_gradient_hand_value() {
        // y = mean(tanh(x)^2), dy/dx_i = 2 tanh(x_i)(1 - tanh(x_i)^2)/n.
        let x = Tensor::from_vec(1, 3, vec![0.3, -0.2, 0.9]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let t1 = tape.tanh(v);
        let t2 = tape.square(t1);
        let y = tape.mean(t2);
        let grads = tape.backward(y).unwrap();
        let gx = grads.get(v).unwrap();
        for i in 0..3 {
            let th = x.data[i].tanh();
            let expect = 2.0 * th * (1.0 - th * th) / 3.0;
            assert!((gx.data[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_forward_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 3.0]));
        let g = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 1.0]));
        let b = tape.leaf(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        // mu = 2, var = 1, xhat = -/+ 1/sqrt(1 + 1e-5).
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        let yv = tape.value(y);
        assert!((yv.data[0] + expect).abs() < 1e-15);
        assert!((yv.data[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn scatter_accumulates_duplicates() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(2, 1, vec![1.0, 2.5]));
        let pos = Rc::new(vec![(0usize, 1usize), (0, 1)]);
        let m = tape.scatter_matrix(v, pos, 2).unwrap();
        assert_eq!(tape.value(m).data, vec![0.0, 3.5, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::new();
            let a = tape.leaf(randt(&mut rng, 6, 6));
            let b = tape.leaf(randt(&mut rng, 6, 6));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.tanh(c);
            let s = tape.sum(d);
            tape.scalar_value(s).to_bits()
        };
        assert_eq!(run(), run());
    }
}
