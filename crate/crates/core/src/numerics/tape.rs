//! Reverse-mode automatic differentiation over a dynamic tape of matrix ops.
//!
//! Every operation appends a node holding its value and the identifiers of its
//! inputs, so nodes are stored in topological order by construction. The
//! backward pass walks the nodes once in reverse and accumulates gradients only
//! for nodes that depend on a leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::numerics::matrix::{matmul_into, Matrix};
use crate::numerics::ops::{self, gelu, gelu_grad};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows treated as one causal sequence by attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        n_heads: usize,
        // per segment, per head: len × len row-stochastic lower-triangular matrix
        probs: Vec<Vec<Matrix>>,
    },
    GatherRows(Var, Vec<usize>),
    /// Rows overwritten in order; a later entry for the same row wins.
    ReplaceRows {
        src: Var,
        rows: Vec<(usize, Var)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Matrix,
        total_weight: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for one computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// A leaf whose gradient will be computed.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(mismatch("add_row", av, bv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise layer norm with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let (rows, cols) = xv.shape();
        let mut value = Matrix::zeros(rows, cols);
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        let ones = vec![1.0; cols];
        let zeros = vec![0.0; cols];
        for i in 0..rows {
            let (inv, fl) = ops::layer_norm_row(xv.row(i), &ones, &zeros, normalized.row_mut(i));
            for (((o, &nrm), &g), &b) in value
                .row_mut(i)
                .iter_mut()
                .zip(normalized.row(i))
                .zip(gv.as_slice())
                .zip(bv.as_slice())
            {
                *o = nrm * g + b;
            }
            inv_std.push(inv);
            floored.push(fl);
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
                floored,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N × d`; each segment is attended independently with
    /// a lower-triangular mask. Heads split the columns evenly.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        n_heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() {
            return Err(mismatch("causal_attention", qv, kv));
        }
        if qv.shape() != vv.shape() {
            return Err(mismatch("causal_attention", qv, vv));
        }
        let (n, d) = qv.shape();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{d} columns not divisible into {n_heads} heads"
            )));
        }
        if let Some(end) = segments.iter().map(|s| s.start + s.len).max() {
            if end > n {
                return Err(Error::OutOfRange {
                    what: "attention segment",
                    index: end,
                    limit: n,
                });
            }
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let mut per_head = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Matrix::zeros(seg.len, seg.len);
                for i in 0..seg.len {
                    let qi = &qv.row(seg.start + i)[cols.clone()];
                    let scores = &mut p.row_mut(i)[..=i];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(seg.start + j)[cols.clone()];
                        *s = crate::numerics::matrix::dot(qi, kj) * scale;
                    }
                    ops::softmax_in_place(scores);
                    for j in 0..=i {
                        let w = p.get(i, j);
                        let vj = &vv.row(seg.start + j)[cols.clone()];
                        let orow = &mut out.row_mut(seg.start + i)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::OutOfRange {
                    what: "gather_rows index",
                    index: id,
                    limit: tv.rows(),
                });
            }
            value.row_mut(i).copy_from_slice(tv.row(id));
        }
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Copy of `src` with row `row` overwritten by the `1 × n` node `with`.
    pub fn replace_row(&mut self, src: Var, row: usize, with: Var) -> Result<Var> {
        self.replace_rows(src, &[(row, with)])
    }

    /// Copy of `src` with each listed row overwritten by its `1 × n` node,
    /// applied in order.
    pub fn replace_rows(&mut self, src: Var, rows: &[(usize, Var)]) -> Result<Var> {
        let sv = self.value(src);
        for &(row, with) in rows {
            let wv = self.value(with);
            if wv.shape() != (1, sv.cols()) {
                return Err(mismatch("replace_rows", sv, wv));
            }
            if row >= sv.rows() {
                return Err(Error::OutOfRange {
                    what: "replace_rows row",
                    index: row,
                    limit: sv.rows(),
                });
            }
        }
        let mut value = sv.clone();
        for &(row, with) in rows {
            value
                .row_mut(row)
                .copy_from_slice(self.nodes[with.0].value.as_slice());
        }
        let mut inputs: Vec<Var> = rows.iter().map(|r| r.1).collect();
        inputs.push(src);
        Ok(self.push(
            value,
            Op::ReplaceRows {
                src,
                rows: rows.to_vec(),
            },
            &inputs,
        ))
    }

    /// Mean next-token cross-entropy over rows with a target; result is `1 × 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.weighted_cross_entropy(logits, targets, &vec![1.0; targets.len()])
    }

    /// `Σ wᵢ CEᵢ / Σ wᵢ` over rows with a target.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || weights.len() != lv.rows() {
            return Err(Error::LengthMismatch {
                op: "cross_entropy",
                left: lv.rows(),
                right: if targets.len() != lv.rows() {
                    targets.len()
                } else {
                    weights.len()
                },
            });
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        let mut total_weight = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            total += weights[i] * ops::cross_entropy(lv.row(i), t)?;
            total_weight += weights[i];
            let row = probs.row_mut(i);
            row.copy_from_slice(lv.row(i));
            ops::softmax_in_place(row);
        }
        if total_weight <= 0.0 {
            return Err(Error::EmptyInput("cross_entropy targets"));
        }
        let value = Matrix::filled(1, 1, total / total_weight);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            &[logits],
        ))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).as_slice().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Backpropagates from the `1 × 1` node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward (expects scalar)",
                left: out_val.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let bt = self.value(*b).transpose();
                        let mut da = Matrix::zeros(g.rows(), bt.cols());
                        matmul_into(&g, &bt, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).transposed_matmul(&g)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, x) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = hadamard(&g, self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = hadamard(&g, self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(x.as_slice())
                        .map(|(gi, &xi)| gi * gelu_grad(xi))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                    floored,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                let gij = g.get(i, j);
                                dg.as_mut_slice()[j] += gij * normalized.get(i, j);
                                db.as_mut_slice()[j] += gij;
                            }
                        }
                        if self.needs(*gain) {
                            accumulate(&mut grads, *gain, dg);
                        }
                        if self.needs(*bias) {
                            accumulate(&mut grads, *bias, db);
                        }
                    }
                    if self.needs(*x) {
                        let n = cols as f64;
                        let mut dx = Matrix::zeros(rows, cols);
                        let mut dxhat = vec![0.0; cols];
                        for i in 0..rows {
                            for (j, d) in dxhat.iter_mut().enumerate() {
                                *d = g.get(i, j) * gv.as_slice()[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / n;
                            let xhat = normalized.row(i);
                            let mean_dx = if floored[i] {
                                0.0
                            } else {
                                dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n
                            };
                            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                                *o = inv_std[i] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    n_heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / n_heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(n, d);
                    let mut dk = Matrix::zeros(n, d);
                    let mut dv = Matrix::zeros(n, d);
                    let mut dp = Vec::new();
                    for (seg, per_head) in segments.iter().zip(probs) {
                        for (h, p) in per_head.iter().enumerate() {
                            let c0 = h * dh;
                            for i in 0..seg.len {
                                let gi = &g.row(seg.start + i)[c0..c0 + dh];
                                dp.clear();
                                for j in 0..=i {
                                    let w = p.get(i, j);
                                    let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                                    dp.push(crate::numerics::matrix::dot(gi, vj));
                                    let dvj = &mut dv.row_mut(seg.start + j)[c0..c0 + dh];
                                    for (o, &x) in dvj.iter_mut().zip(gi) {
                                        *o += w * x;
                                    }
                                }
                                let inner: f64 = (0..=i).map(|j| p.get(i, j) * dp[j]).sum();
                                for (j, &dpj) in dp.iter().enumerate() {
                                    let ds = p.get(i, j) * (dpj - inner) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = &kv.row(seg.start + j)[c0..c0 + dh];
                                    let dqi = &mut dq.row_mut(seg.start + i)[c0..c0 + dh];
                                    for (o, &x) in dqi.iter_mut().zip(kj) {
                                        *o += ds * x;
                                    }
                                    let qi = &qv.row(seg.start + i)[c0..c0 + dh];
                                    let dkj = &mut dk.row_mut(seg.start + j)[c0..c0 + dh];
                                    for (o, &x) in dkj.iter_mut().zip(qi) {
                                        *o += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::GatherRows(table, ids) => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ReplaceRows { src, rows } => {
                    for (i, &(row, with)) in rows.iter().enumerate() {
                        let overwritten = rows[i + 1..].iter().any(|r| r.0 == row);
                        if !overwritten && self.needs(with) {
                            accumulate(&mut grads, with, Matrix::row_vector(g.row(row)));
                        }
                    }
                    if self.needs(*src) {
                        let mut ds = g;
                        for &(row, _) in rows {
                            ds.row_mut(row).fill(0.0);
                        }
                        accumulate(&mut grads, *src, ds);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                    total_weight,
                } => {
                    let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let upstream = g.get(0, 0) * weights[i] / total_weight;
                        for (o, p) in dl.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *o = p * upstream;
                        }
                        dl.row_mut(i)[t] -= upstream;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        Matrix::filled(av.rows(), av.cols(), g.get(0, 0)),
                    );
                }
            }
        }
        // only leaves keep their gradients
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("hadamard operands share a shape")
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
