// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep. Leaf
//! gradients persist on the tape and accumulate across `backward` calls
//! until [`Tape::zero_grad`].

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Trans};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which reduction a loss uses over its non-ignored rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    last_visits: usize,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that may receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf sharing storage with an existing tensor (parameters).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a value into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of nodes visited by the most recent backward sweep.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Trans::No, tb.data(), Trans::No, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul_nt", ta)?;
        let (n, k2) = require_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Trans::No, tb.data(), Trans::Yes, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `[c]` (or `[1,c]`) bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Multiplies row `i` of `x[r,c]` by `w[i]`, where `w` is `[r,1]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, c) = (tx.rows(), tx.cols());
        if tw.numel() != r {
            return Err(shape_err("scale_rows", tx, tw));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(c.max(1)).enumerate() {
            let s = tw.data()[i];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::ScaleRows(x, w), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    // ---- normalization ----

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Per-row layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- indexing and layout ----

    /// Rows of `table` in `ids` order; backward scatters additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = require_matrix("gather_rows", tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(TensorError::Index {
                    position,
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("slice_cols", tx)?;
        if start + len > c {
            return Err(TensorError::Contract(format!(
                "slice_cols [{start}, {}) exceeds {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("slice_rows", tx)?;
        if start + len > r {
            return Err(TensorError::Contract(format!(
                "slice_rows [{start}, {}) exceeds {r} rows",
                start + len
            )));
        }
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let r = require_matrix("concat_cols", self.value(*first))?.0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = require_matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            let pc = tp.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + pc].copy_from_slice(tp.row(i));
            }
            off += pc;
        }
        let t = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let c = require_matrix("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pr, pc) = require_matrix("concat_rows", tp)?;
            if pc != c {
                return Err(shape_err("concat_rows", self.value(*first), tp));
            }
            data.extend_from_slice(tp.data());
            rows += pr;
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    // ---- reductions ----

    /// Column means, `[r,c] -> [1,c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("mean_rows", tx)?;
        if r == 0 {
            return Err(TensorError::Contract("mean_rows of zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let t = Tensor::new(vec![1, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Cross-entropy of `logits[L,V]` against `targets`; rows whose target
    /// equals `ignore` are excluded. Returns the loss and the number of
    /// counted rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
        reduction: Reduction,
    ) -> Result<(Var, usize)> {
        let tl = self.value(logits);
        let (l, v) = require_matrix("cross_entropy", tl)?;
        if targets.len() != l {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            if t == ignore {
                continue;
            }
            if t >= v {
                return Err(TensorError::Index {
                    position: i,
                    index: t,
                    len: v,
                });
            }
            total += mx + z.ln() - row[t];
            count += 1;
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => {
                if count == 0 {
                    return Err(TensorError::Contract(
                        "cross_entropy mean is undefined: every position is ignored".into(),
                    ));
                }
                1.0 / count as f64
            }
        };
        let rg = self.rg(logits);
        let var = self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                scale,
            },
            rg,
        );
        Ok((var, count))
    }

    // ---- backward ----

    /// Reverse sweep from a one-element `loss`, accumulating into leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            visits += 1;
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(nodes, node, &g, &mut grads, &mut self.leaf_grads[i]);
        }
        self.last_visits = visits;
        Ok(())
    }
}

fn acc<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    leaf: &mut Option<Vec<f64>>,
) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => match leaf {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => *leaf = Some(g.to_vec()),
        },
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm(m, n, k, g, Trans::No, val(*b).data(), Trans::Yes, 1.0, ga);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm(k, m, n, val(*a).data(), Trans::Yes, g, Trans::No, 1.0, gb);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm(m, n, k, g, Trans::No, val(*b).data(), Trans::No, 1.0, ga);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm(n, m, k, g, Trans::Yes, val(*a).data(), Trans::No, 1.0, gb);
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let bv = val(*b).data();
                for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * w;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let av = val(*a).data();
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * w;
                }
            }
        }
        Op::AddRow(x, bias) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let c = val(*x).cols().max(1);
            if let Some(gb) = acc(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
            }
        }
        Op::ScaleRows(x, w) => {
            let c = val(*x).cols().max(1);
            if let Some(gx) = acc(nodes, grads, *x) {
                let wv = val(*w).data();
                for (i, (grow, gin)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                    grow.iter_mut().zip(gin).for_each(|(a, b)| *a += b * wv[i]);
                }
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                let xv = val(*x).data();
                for (i, (gin, xrow)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                    gw[i] += gin.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let y = node.value.data();
                for ((a, b), t) in gx.iter_mut().zip(g).zip(y) {
                    *a += b * (1.0 - t * t);
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let xv = val(*x).data();
                for ((a, b), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *a += b * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let xv = val(*x).data();
                for ((a, b), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *a += b;
                    }
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let y = node.value.data();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = val(*x).cols();
            let gv = val(*gain).data();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for grow in g.chunks(d) {
                    gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hrow[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        gx[r * d + j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = val(*table).cols();
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let c = val(*x).cols();
                let len = node.value.cols();
                for (i, grow) in g.chunks(len.max(1)).enumerate() {
                    let dst = &mut gx[i * c + start..i * c + start + len];
                    dst.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let c = val(*x).cols();
                let dst = &mut gx[start * c..start * c + g.len()];
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let pc = val(p).cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for (i, grow) in gp.chunks_mut(pc.max(1)).enumerate() {
                        let src = &g[i * total + off..i * total + off + pc];
                        grow.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                if let Some(gp) = acc(nodes, grads, p) {
                    gp.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(a, b)| *a += b);
                }
                off += n;
            }
        }
        Op::MeanRows(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let r = val(*x).rows() as f64;
                let c = g.len();
                for row in gx.chunks_mut(c) {
                    row.iter_mut().zip(g).for_each(|(a, b)| *a += b / r);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            scale,
        } => {
            if let Some(gl) = acc(nodes, grads, *logits) {
                let v = val(*logits).cols();
                let s = g[0] * scale;
                for (i, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        gl[i * v + j] += s * probs[i * v + j];
                    }
                    gl[i * v + t] -= s;
                }
            }
        }
    }
}
