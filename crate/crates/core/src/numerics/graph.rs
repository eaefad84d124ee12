//! Define-by-run computation trace with reverse-mode gradients.
//!
//! Every op evaluates eagerly and records its inputs. [`Graph::backward`]
//! walks the trace in reverse and accumulates gradients into the
//! [`ParamStore`] tensors that were loaded with [`Graph::param`]. Frozen
//! tensors receive gradients like any other; freezing is the optimizer's job.

use std::collections::HashMap;

use super::matrix::{dot, matmul_at_into, matmul_bt_into, Matrix, Real};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Which key positions each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    Full,
    Causal,
    /// Causal, and additionally every key flagged `true` is hidden from all rows.
    CausalBlocked(Vec<bool>),
    /// Explicit `rows × cols` table, `true` = attendable.
    Dense {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::CausalBlocked(blocked) => j <= i && !blocked.get(j).copied().unwrap_or(false),
            AttnMask::Dense { cols, allowed, .. } => allowed[i * cols + j],
        }
    }

    /// Keys past this bound are never attendable from row `i`.
    #[inline]
    fn key_limit(&self, i: usize, k: usize) -> usize {
        match self {
            AttnMask::Causal | AttnMask::CausalBlocked(_) => (i + 1).min(k),
            _ => k,
        }
    }

    fn check(&self, q: usize, k: usize) -> Result<()> {
        match self {
            AttnMask::Dense { rows, cols, allowed } => {
                if *rows != q || *cols != k || allowed.len() != q * k {
                    return Err(Error::shape(
                        "attention",
                        format!("mask {rows}x{cols} for {q}x{k} scores"),
                    ));
                }
            }
            AttnMask::CausalBlocked(b) if b.len() < k => {
                return Err(Error::shape(
                    "attention",
                    format!("blocked-key mask of length {} for {k} keys", b.len()),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Silu(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
        weights: Vec<Matrix<T>>,
    },
    Concat(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    Reshape(NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Gradients of a scalar root with respect to the leaves (inputs and
/// parameters) of a trace.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, name: &str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Matrix<T>) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    /// Loads a parameter into the trace; repeated loads share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `x + b` with a `1×n` bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        let bias = bv.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, b), "add_bias")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
        self.push(out, Op::Silu(x), "silu")
    }

    /// Row-wise root-mean-square normalisation with a learned `1×d` gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::shape(
                "rms_norm",
                format!("gain {:?} for input {:?}", gv.shape(), xv.shape()),
            ));
        }
        let d = T::c(xv.cols() as f64);
        let eps = T::c(RMS_EPS);
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        let g = gv.row(0).to_vec();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
            let ir = T::one() / (ms + eps).sqrt();
            for (o, &gg) in row.iter_mut().zip(&g) {
                *o = *o * ir * gg;
            }
            inv.push(ir);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms: inv }, "rms_norm")
    }

    /// Multi-head scaled dot-product attention. Columns of `q`, `k`, `v` are
    /// split evenly into `heads` blocks.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (out, weights) = attention_kernel(self.value(q), self.value(k), self.value(v), heads, &mask)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                weights,
            },
            "attention",
        )
    }

    /// Per-head attention weights of an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[Matrix<T>]> {
        match &self.nodes.get(id.0)?.op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let refs: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&refs)?;
        self.push(v, Op::Concat(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        self.push(v, Op::SliceRows { x, start }, "slice_rows")
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (i, &ix) in indices.iter().enumerate() {
            if ix >= t.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {ix} out of bounds for table with {} rows", t.rows()),
                ));
            }
            out.row_mut(i).copy_from_slice(t.row(ix));
        }
        self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(x).reshaped(rows, cols)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), "sum")
    }

    /// Mean of several `1×1` nodes.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let stacked = self.concat_rows(xs)?;
        let s = self.sum(stacked)?;
        self.scale(s, T::one() / T::c(xs.len() as f64))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore: Option<usize>) -> Result<NodeId> {
        let lv = self.value(logits);
        let (probs, loss, t, count) = cross_entropy_kernel(lv, targets, ignore)?;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: t,
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a `1×1` root. Parameter gradients are *added* to
    /// `store`; call [`ParamStore::zero_grads`] between independent passes.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::Backward("no recorded trace".into()));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Backward(format!(
                "root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Param(pid) => {
                    store.get_mut(*pid).grad.add_assign(&g);
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    matmul_bt_into(&g, bv, &mut ga);
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    matmul_at_into(av, &g, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *gv *= s * (T::one() + v * (T::one() - s));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let d = T::c(xv.cols() as f64);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut gg = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        let ir = inv_rms[r];
                        let (xr, dy) = (xv.row(r), g.row(r));
                        let mut proj = T::zero();
                        for c in 0..xv.cols() {
                            let xhat = xr[c] * ir;
                            gg.data_mut()[c] += dy[c] * xhat;
                            proj += dy[c] * gv.get(0, c) * xhat;
                        }
                        proj /= d;
                        let out = gx.row_mut(r);
                        for c in 0..xv.cols() {
                            let u = dy[c] * gv.get(0, c);
                            out[c] = ir * (u - xr[c] * ir * proj);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    weights,
                } => {
                    let (gq, gk, gv) =
                        attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, mask, weights, &g);
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(start, rows)?);
                        start += rows;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, indices } => {
                    let tv = self.value(*table);
                    let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &ix) in indices.iter().enumerate() {
                        for (o, &v) in gt.row_mut(ix).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, g.reshaped(r, c)?);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.scale(*s));
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let scale = g.get(0, 0) / T::c(*count as f64);
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let out = gl.row_mut(r);
                            out.copy_from_slice(probs.row(r));
                            out[t] -= T::one();
                            out.iter_mut().for_each(|v| *v *= scale);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

const RMS_EPS: f64 = 1e-6;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub(crate) fn head_block<T: Real>(m: &Matrix<T>, h: usize, dh: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, h: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row(r));
    }
}

/// Forward attention returning the output and the per-head weight matrices.
pub(crate) fn attention_kernel<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mask: &AttnMask,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let (nq, d) = q.shape();
    let nk = k.rows();
    if heads == 0 || k.cols() != d || v.rows() != nk || d % heads != 0 || v.cols() % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?}, heads {heads}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    mask.check(nq, nk)?;
    let dh = d / heads;
    let dv = v.cols() / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = Matrix::zeros(nq, v.cols());
    let mut weights = Vec::with_capacity(heads);
    let mut scores = vec![T::zero(); nk];
    for h in 0..heads {
        let (qh, kh, vh) = (head_block(q, h, dh), head_block(k, h, dh), head_block(v, h, dv));
        let mut w = Matrix::zeros(nq, nk);
        let mut oh = Matrix::zeros(nq, dv);
        for i in 0..nq {
            let limit = mask.key_limit(i, nk);
            let qi = qh.row(i);
            let mut max = T::neg_infinity();
            let mut any = false;
            for j in 0..limit {
                if mask.allows(i, j) {
                    let s = dot(qi, kh.row(j)) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                    any = true;
                }
            }
            if !any {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            let wrow = w.row_mut(i);
            let mut total = T::zero();
            for j in 0..limit {
                if mask.allows(i, j) {
                    let e = (scores[j] - max).exp();
                    wrow[j] = e;
                    total += e;
                }
            }
            let inv = T::one() / total;
            for x in wrow[..limit].iter_mut() {
                *x *= inv;
            }
            let orow = oh.row_mut(i);
            for j in 0..limit {
                let p = wrow[j];
                if p != T::zero() {
                    for (o, &vv) in orow.iter_mut().zip(vh.row(j)) {
                        *o += p * vv;
                    }
                }
            }
        }
        scatter_head(&mut out, &oh, h, dv);
        weights.push(w);
    }
    Ok((out, weights))
}

fn attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mask: &AttnMask,
    weights: &[Matrix<T>],
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (nq, d) = q.shape();
    let nk = k.rows();
    let dh = d / heads;
    let dv = v.cols() / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut gq = Matrix::zeros(nq, d);
    let mut gk = Matrix::zeros(nk, d);
    let mut gv = Matrix::zeros(nk, v.cols());
    let mut dp = vec![T::zero(); nk];
    for h in 0..heads {
        let (qh, kh, vh, goh) = (
            head_block(q, h, dh),
            head_block(k, h, dh),
            head_block(v, h, dv),
            head_block(g, h, dv),
        );
        let w = &weights[h];
        let mut gqh = Matrix::zeros(nq, dh);
        let mut gkh = Matrix::zeros(nk, dh);
        let mut gvh = Matrix::zeros(nk, dv);
        for i in 0..nq {
            let limit = mask.key_limit(i, nk);
            let (wrow, go) = (w.row(i), goh.row(i));
            let mut s = T::zero();
            for j in 0..limit {
                let p = wrow[j];
                if p != T::zero() {
                    let d = dot(go, vh.row(j));
                    dp[j] = d;
                    s += p * d;
                    for (o, &x) in gvh.row_mut(j).iter_mut().zip(go) {
                        *o += p * x;
                    }
                }
            }
            let qi = qh.row(i).to_vec();
            for j in 0..limit {
                let p = wrow[j];
                if p != T::zero() {
                    let ds = p * (dp[j] - s) * scale;
                    for (o, &x) in gqh.row_mut(i).iter_mut().zip(kh.row(j)) {
                        *o += ds * x;
                    }
                    for (o, &x) in gkh.row_mut(j).iter_mut().zip(&qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        scatter_head(&mut gq, &gqh, h, dh);
        scatter_head(&mut gk, &gkh, h, dh);
        scatter_head(&mut gv, &gvh, h, dv);
    }
    (gq, gk, gv)
}

/// Returns (softmax probabilities, mean loss, per-row targets, counted rows).
pub(crate) fn cross_entropy_kernel<T: Real>(
    logits: &Matrix<T>,
    targets: &[usize],
    ignore: Option<usize>,
) -> Result<(Matrix<T>, T, Vec<Option<usize>>, usize)> {
    let (n, vocab) = logits.shape();
    if targets.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {n} rows", targets.len()),
        ));
    }
    let mut probs = Matrix::zeros(n, vocab);
    let mut total = T::zero();
    let mut count = 0usize;
    let mut kept = Vec::with_capacity(n);
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            kept.push(None);
            continue;
        }
        if t >= vocab {
            return Err(Error::Target(format!("target {t} outside vocabulary of {vocab}")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        let prow = probs.row_mut(r);
        for (p, &l) in prow.iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in prow.iter_mut() {
            *p /= z;
        }
        total += z.ln() + max - row[t];
        count += 1;
        kept.push(Some(t));
    }
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    Ok((probs, total / T::c(count as f64), kept, count))
}
