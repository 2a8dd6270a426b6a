//! A reverse-mode tape over 2-D `f64` matrices.
//!
//! Every value on the tape is a [`Matrix`]. Parameters are referenced from a
//! borrowed [`ParamStore`] rather than copied. `backward` walks the tape once
//! in reverse and returns gradients for every parameter that reached the
//! loss; parameters that did not are reported as absent (exactly zero).

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    GroupMul { x: Var, g: Var, group: usize },
    GroupAdd { x: Var, g: Var, group: usize },
    TileAdd { x: Var, y: Var },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Attention { qkv: Var, groups: usize, heads: usize, probs: Vec<f64> },
    Mse { pred: Var, target: Matrix },
    NegCosine { pred: Var, target: Matrix },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Result of [`Tape::neg_cosine_mean`].
#[derive(Clone, Copy, Debug)]
pub struct CosineOutput {
    pub loss: Var,
    /// Rows where either vector had zero norm (scored as similarity 0).
    pub degenerate_rows: usize,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x[r, c] + b[0, c]` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        assert_eq!(vb.rows(), 1);
        assert_eq!(vx.cols(), vb.cols());
        let mut out = vx.clone();
        let bias = vb.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddRow(x, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::Offset(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, no affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, rstd }, rg)
    }

    /// `x[g*group + i, c] * s[g, c]`: per-sample row vectors broadcast over the
    /// `group` token rows belonging to that sample.
    pub fn group_mul(&mut self, x: Var, s: Var, group: usize) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(vx.cols(), vs.cols());
        assert_eq!(vx.rows(), vs.rows() * group, "group_mul: row mismatch");
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let srow = vs.row(r / group);
            for (o, m) in out.row_mut(r).iter_mut().zip(srow) {
                *o *= m;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::GroupMul { x, g: s, group }, rg)
    }

    pub fn group_add(&mut self, x: Var, s: Var, group: usize) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(vx.cols(), vs.cols());
        assert_eq!(vx.rows(), vs.rows() * group, "group_add: row mismatch");
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let srow = vs.row(r / group);
            for (o, m) in out.row_mut(r).iter_mut().zip(srow) {
                *o += m;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::GroupAdd { x, g: s, group }, rg)
    }

    /// Adds `y` (n x c) to every consecutive block of n rows of `x`.
    pub fn tile_add(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        assert_eq!(vx.cols(), vy.cols());
        assert_eq!(vx.rows() % vy.rows(), 0, "tile_add: row mismatch");
        let n = vy.rows();
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, a) in out.row_mut(r).iter_mut().zip(vy.row(r % n)) {
                *o += a;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(out, Op::TileAdd { x, y }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for p in parts {
                let v = match &self.nodes[p.0].value {
                    Value::Owned(m) => m,
                    Value::Param(id) => self.params.get(*id),
                };
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                dst[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols());
        let out = Matrix::from_fn(vx.rows(), len, |r, c| vx.get(r, start + c));
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Matrix::zeros(idx.len(), vt.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(vt.row(i));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head softmax self-attention over `groups` independent sequences.
    ///
    /// `qkv` is `(groups * n) x (3 * d)` with columns `[q | k | v]`; each of
    /// q, k, v is split into `heads` contiguous column blocks.
    pub fn attention(&mut self, qkv: Var, groups: usize, heads: usize) -> Var {
        let v = self.value(qkv);
        let (rows, cols3) = v.shape();
        assert_eq!(cols3 % 3, 0);
        assert_eq!(rows % groups, 0);
        let d = cols3 / 3;
        assert_eq!(d % heads, 0);
        let n = rows / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = v.data();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = vec![0.0; groups * heads * n * n];
        for g in 0..groups {
            let base = g * n * cols3;
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * n * n..(g * heads + h + 1) * n * n];
                let q = MatRef {
                    data: &data[base + h * dh..],
                    row_stride: cols3,
                    col_stride: 1,
                };
                // K^T: (dh x n)
                let kt = MatRef {
                    data: &data[base + d + h * dh..],
                    row_stride: 1,
                    col_stride: cols3,
                };
                gemm(n, dh, n, scale, q, kt, 0.0, p, n);
                for i in 0..n {
                    softmax_in_place(&mut p[i * n..(i + 1) * n]);
                }
                let vv = MatRef {
                    data: &data[base + 2 * d + h * dh..],
                    row_stride: cols3,
                    col_stride: 1,
                };
                let o = &mut out.data_mut()[g * n * d + h * dh..];
                gemm(n, n, dh, 1.0, MatRef::row_major(p, n), vv, 0.0, o, d);
            }
        }
        let rg = self.rg(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Mean squared error against a constant target, as a 1x1 value.
    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse: shape mismatch");
        let n = vp.len().max(1) as f64;
        let s: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred);
        self.push(
            Matrix::scalar(s / n),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Negative mean row-wise cosine similarity between `pred` and a constant
    /// `target`. Rows where either side has zero norm contribute 0.
    pub fn neg_cosine_mean(&mut self, pred: Var, target: &Matrix) -> CosineOutput {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "cosine: shape mismatch");
        let rows = vp.rows();
        let mut total = 0.0;
        let mut degenerate = 0;
        for r in 0..rows {
            match cosine(vp.row(r), target.row(r)) {
                Some(c) => total += c,
                None => degenerate += 1,
            }
        }
        let rg = self.rg(pred);
        let loss = self.push(
            Matrix::scalar(-total / rows.max(1) as f64),
            Op::NegCosine {
                pred,
                target: target.clone(),
            },
            rg,
        );
        CosineOutput {
            loss,
            degenerate_rows: degenerate,
        }
    }

    /// Gradients of the 1x1 value `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, i, g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        node: &Node,
        index: usize,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        out: &mut Gradients,
    ) {
        let mut send = |v: Var, m: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = Matrix::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(vb.data(), n),
                        0.0,
                        da.data_mut(),
                        k,
                    );
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(va.data(), k),
                        MatRef::row_major(g.data(), n),
                        0.0,
                        db.data_mut(),
                        n,
                    );
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    send(*b, g.clone());
                }
                send(*a, g);
            }
            Op::AddRow(x, b) => {
                if self.rg(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(*b, db);
                }
                send(*x, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    send(*a, Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    send(*b, Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(x, s) => {
                let mut g = g;
                g.scale_in_place(*s);
                send(*x, g);
            }
            Op::Offset(x) => send(*x, g),
            Op::Silu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                send(*x, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                send(*x, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::LayerNorm { x, rstd } => {
                let y = self.node_value(index);
                let (rows, cols) = g.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gy.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((d, a), b) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *d = rstd[r] * (a - mean_g - b * mean_gy);
                    }
                }
                send(*x, dx);
            }
            Op::GroupMul { x, g: s, group } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                if self.rg(*s) {
                    let mut ds = Matrix::zeros(vs.rows(), vs.cols());
                    for r in 0..g.rows() {
                        let dst = ds.row_mut(r / group);
                        for ((d, a), b) in dst.iter_mut().zip(g.row(r)).zip(vx.row(r)) {
                            *d += a * b;
                        }
                    }
                    send(*s, ds);
                }
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for (d, m) in dx.row_mut(r).iter_mut().zip(vs.row(r / group)) {
                            *d *= m;
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::GroupAdd { x, g: s, group } => {
                if self.rg(*s) {
                    let vs = self.value(*s);
                    let mut ds = Matrix::zeros(vs.rows(), vs.cols());
                    for r in 0..g.rows() {
                        for (d, a) in ds.row_mut(r / group).iter_mut().zip(g.row(r)) {
                            *d += a;
                        }
                    }
                    send(*s, ds);
                }
                send(*x, g);
            }
            Op::TileAdd { x, y } => {
                if self.rg(*y) {
                    let vy = self.value(*y);
                    let n = vy.rows();
                    let mut dy = Matrix::zeros(n, vy.cols());
                    for r in 0..g.rows() {
                        for (d, a) in dy.row_mut(r % n).iter_mut().zip(g.row(r)) {
                            *d += a;
                        }
                    }
                    send(*y, dy);
                }
                send(*x, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.rg(*p) {
                        let d = Matrix::from_fn(g.rows(), c, |r, j| g.get(r, off + j));
                        send(*p, d);
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*x, dx);
            }
            Op::GatherRows { table, idx } => {
                let vt = self.value(*table);
                let mut dt = Matrix::zeros(vt.rows(), vt.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (d, a) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += a;
                    }
                }
                send(*table, dt);
            }
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            } => {
                let dqkv = self.attention_backward(*qkv, *groups, *heads, probs, &g);
                send(*qkv, dqkv);
            }
            Op::Mse { pred, target } => {
                let vp = self.value(*pred);
                let scale = 2.0 * g.item() / vp.len().max(1) as f64;
                let d = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                send(*pred, Matrix::from_vec(vp.rows(), vp.cols(), d));
            }
            Op::NegCosine { pred, target } => {
                let vp = self.value(*pred);
                let rows = vp.rows();
                let scale = -g.item() / rows.max(1) as f64;
                let mut d = Matrix::zeros(rows, vp.cols());
                for r in 0..rows {
                    let (p, t) = (vp.row(r), target.row(r));
                    let np = norm(p);
                    let nt = norm(t);
                    if np == 0.0 || nt == 0.0 {
                        continue;
                    }
                    let c = dot(p, t) / (np * nt);
                    // d cos / d p = t / (|p||t|) - cos * p / |p|^2
                    for ((o, &pi), &ti) in d.row_mut(r).iter_mut().zip(p).zip(t) {
                        *o = scale * (ti / (np * nt) - c * pi / (np * np));
                    }
                }
                send(*pred, d);
            }
        }
    }

    fn node_value(&self, index: usize) -> &Matrix {
        self.value(Var(index))
    }

    fn attention_backward(
        &self,
        qkv: Var,
        groups: usize,
        heads: usize,
        probs: &[f64],
        g: &Matrix,
    ) -> Matrix {
        let v = self.value(qkv);
        let (rows, cols3) = v.shape();
        let d = cols3 / 3;
        let n = rows / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = v.data();
        let mut dqkv = Matrix::zeros(rows, cols3);
        let mut dp = vec![0.0; n * n];
        for gi in 0..groups {
            let base = gi * n * cols3;
            for h in 0..heads {
                let p = &probs[(gi * heads + h) * n * n..(gi * heads + h + 1) * n * n];
                let go = MatRef {
                    data: &g.data()[gi * n * d + h * dh..],
                    row_stride: d,
                    col_stride: 1,
                };
                // dV = P^T dO
                {
                    let dv = &mut dqkv.data_mut()[base + 2 * d + h * dh..];
                    gemm(n, n, dh, 1.0, MatRef::transposed(p, n), go, 0.0, dv, cols3);
                }
                // dP = dO V^T
                let vt = MatRef {
                    data: &data[base + 2 * d + h * dh..],
                    row_stride: 1,
                    col_stride: cols3,
                };
                gemm(n, dh, n, 1.0, go, vt, 0.0, &mut dp, n);
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = scale * pv * (*dv - s);
                    }
                }
                // dQ = dS K
                let k = MatRef {
                    data: &data[base + d + h * dh..],
                    row_stride: cols3,
                    col_stride: 1,
                };
                {
                    let dq = &mut dqkv.data_mut()[base + h * dh..];
                    gemm(n, n, dh, 1.0, MatRef::row_major(&dp, n), k, 0.0, dq, cols3);
                }
                // dK = dS^T Q
                let q = MatRef {
                    data: &data[base + h * dh..],
                    row_stride: cols3,
                    col_stride: 1,
                };
                let dk = &mut dqkv.data_mut()[base + d + h * dh..];
                gemm(n, n, dh, 1.0, MatRef::transposed(&dp, n), q, 0.0, dk, cols3);
            }
        }
        dqkv
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}
