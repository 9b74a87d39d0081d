//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the tape in reverse and accumulates vector-Jacobian products into
//! the parameter leaves. Node inputs always precede the node itself, so the
//! reverse sweep is a valid topological order. Accumulation is sequential and
//! row-major, which keeps gradients bit-reproducible.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, matmul_macs, matmul_nt, softmax_vec, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMulNT(usize, usize),
    AddRowVec(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    LogSoftmaxRows(usize),
    /// `-(1/B) * sum_b input[b, labels[b]]`
    NllMean(usize, Vec<usize>),
    SumAll(usize),
    /// Multiplies row `b` by the constant `weights[b]`.
    RowScale(usize, Vec<f64>),
    ConcatCols(usize, usize),
    /// Row `b` of the output is row `labels[b]` of the input table.
    GatherRows(usize, Vec<usize>),
    /// `sum_{j,k} |s_j - s_k| * |h_j - h_k|` over all ordered row pairs.
    PairNormProdSum(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to named parameter leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

/// Records a forward computation and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Multiply-accumulate count of all matrix products recorded (and of the
    /// backward products once `backward` ran). Used for deterministic cost
    /// reporting.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf the backward pass ignores.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A named parameter leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        debug_assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        let var = self.push(Op::Leaf, value, true);
        self.params.push((name.to_string(), var.0));
        var
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape(), vb.shape(), "elementwise op shape mismatch");
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("finite elementwise result");
        let rg = self.requires(a) || self.requires(b);
        self.push(op(a.0, b.0), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| c * x).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("finite scale result");
        let rg = self.requires(a);
        self.push(Op::Scale(a.0, c), value, rg)
    }

    /// `x [B,I] * w[O,I]^T -> [B,O]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Var {
        let value = {
            let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
            self.macs += matmul_macs(vx, vw);
            matmul_nt(vx, vw)
        };
        let rg = self.requires(x) || self.requires(w);
        self.push(Op::MatMulNT(x.0, w.0), value, rg)
    }

    /// Adds a length-`O` vector to every row of a `[B,O]` tensor.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        debug_assert_eq!(vx.cols(), vv.numel(), "bias length mismatch");
        let mut out = vx.clone();
        let cols = out.cols();
        for bi in 0..out.rows() {
            let row = out.row_mut(bi);
            for c in 0..cols {
                row[c] += vv.data()[c];
            }
        }
        let rg = self.requires(x) || self.requires(v);
        self.push(Op::AddRowVec(x.0, v.0), out, rg)
    }

    fn unary(&mut self, a: Var, op: fn(usize) -> Op, f: fn(f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("finite unary result");
        let rg = self.requires(a);
        self.push(op(a.0), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(&self.nodes[a.0].value);
        let rg = self.requires(a);
        self.push(Op::LogSoftmaxRows(a.0), value, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = 0.0;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let rg = self.requires(a);
        self.push(Op::SumAll(a.0), Tensor::scalar(acc), rg)
    }

    pub fn row_scale(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let va = &self.nodes[a.0].value;
        debug_assert_eq!(va.rows(), weights.len(), "row weight count mismatch");
        let mut out = va.clone();
        for bi in 0..out.rows() {
            for v in out.row_mut(bi) {
                *v *= weights[bi];
            }
        }
        let rg = self.requires(a);
        self.push(Op::RowScale(a.0, weights), out, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.rows(), vb.rows(), "concat row mismatch");
        let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for bi in 0..rows {
            data.extend_from_slice(va.row(bi));
            data.extend_from_slice(vb.row(bi));
        }
        let value = Tensor::new(vec![rows, ca + cb], data).expect("finite concat");
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::ConcatCols(a.0, b.0), value, rg)
    }

    /// Embedding lookup: output row `b` is table row `labels[b]`.
    pub fn gather_rows(&mut self, table: Var, labels: &[usize]) -> Var {
        let vt = &self.nodes[table.0].value;
        debug_assert!(labels.iter().all(|&y| y < vt.rows()), "label outside table");
        let cols = vt.cols();
        let mut data = Vec::with_capacity(labels.len() * cols);
        for &y in labels {
            data.extend_from_slice(vt.row(y));
        }
        let value = Tensor::new(vec![labels.len(), cols], data).expect("finite gather");
        let rg = self.requires(table);
        self.push(Op::GatherRows(table.0, labels.to_vec()), value, rg)
    }

    /// `sum_{j,k in [B]} |s_j - s_k|_2 * |h_j - h_k|_2` over ordered pairs.
    pub fn pair_norm_prod_sum(&mut self, s: Var, h: Var) -> Var {
        let (vs, vh) = (&self.nodes[s.0].value, &self.nodes[h.0].value);
        debug_assert_eq!(vs.rows(), vh.rows(), "pair sum needs aligned batches");
        let b = vs.rows();
        let mut acc = 0.0;
        for j in 0..b {
            for k in 0..b {
                acc += crate::tensor::l2_distance(vs.row(j), vs.row(k))
                    * crate::tensor::l2_distance(vh.row(j), vh.row(k));
            }
        }
        let rg = self.requires(s) || self.requires(h);
        self.push(Op::PairNormProdSum(s.0, h.0), Tensor::scalar(acc), rg)
    }

    /// Mean cross-entropy of `[B,C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = &self.nodes[logits.0].value;
        if v.shape().len() != 2 {
            return Err(Error::shape("cross_entropy expects [B,C] logits"));
        }
        let (b, c) = (v.rows(), v.cols());
        if c < 2 {
            return Err(Error::contract("cross_entropy needs at least two classes"));
        }
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for {} rows", labels.len(), b)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let lp = self.log_softmax_rows(logits);
        let value = {
            let lpv = &self.nodes[lp.0].value;
            let mut acc = 0.0;
            for (bi, &y) in labels.iter().enumerate() {
                acc -= lpv.get2(bi, y);
            }
            Tensor::scalar(acc / b as f64)
        };
        let rg = self.requires(lp);
        Ok(self.push(Op::NllMean(lp.0, labels.to_vec()), value, rg))
    }

    /// Mean KL divergence between softmax rows of two logits tensors; the
    /// first argument supplies the `P` distribution.
    pub fn kl_div(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let kl_rows = self.kl_rows(p_logits, q_logits)?;
        let total = self.sum_all(kl_rows);
        let b = self.nodes[p_logits.0].value.rows() as f64;
        Ok(self.scale(total, 1.0 / b))
    }

    /// Per-row KL contributions as a `[B,C]` tensor (`sum` over a row is that
    /// sample's KL). Splitting it out lets callers gate rows before reducing.
    pub fn kl_rows(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        {
            let (vp, vq) = (&self.nodes[p_logits.0].value, &self.nodes[q_logits.0].value);
            if vp.shape() != vq.shape() {
                return Err(Error::shape(format!(
                    "kl_div got {:?} vs {:?}",
                    vp.shape(),
                    vq.shape()
                )));
            }
            if vp.shape().len() != 2 {
                return Err(Error::shape("kl_div expects [B,C] logits"));
            }
        }
        let lp = self.log_softmax_rows(p_logits);
        let lq = if p_logits == q_logits { lp } else { self.log_softmax_rows(q_logits) };
        let p = self.exp(lp);
        let diff = self.sub(lp, lq);
        Ok(self.mul(p, diff))
    }

    /// Gradients of the scalar `loss` with respect to every named parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            // Re-deposit so leaf grads survive the sweep.
            grads[id] = Some(gy.clone());
            self.accumulate(id, &gy, &mut grads);
        }

        let mut by_name = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[*id]
                .take()
                .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[*id].value));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&mut self, id: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_into = |grads: &mut [Option<Tensor>], nodes: &[Node], target: usize, delta: Tensor| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(g) => {
                    for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                        *gi += di;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        // Ops are matched by value to keep the borrow on `self.nodes` short.
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, &self.nodes, a, gy.clone());
                add_into(grads, &self.nodes, b, gy.clone());
            }
            Op::Sub(a, b) => {
                add_into(grads, &self.nodes, a, gy.clone());
                let mut neg = gy.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                add_into(grads, &self.nodes, b, neg);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.min(b)].requires_grad || self.nodes[a.max(b)].requires_grad {
                    let (va, vb) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                    let mut da = Tensor::zeros_like(&va);
                    let mut db = Tensor::zeros_like(&vb);
                    for i in 0..gy.numel() {
                        da.data_mut()[i] = gy.data()[i] * vb.data()[i];
                        db.data_mut()[i] = gy.data()[i] * va.data()[i];
                    }
                    add_into(grads, &self.nodes, a, da);
                    add_into(grads, &self.nodes, b, db);
                }
            }
            Op::Scale(a, c) => {
                let mut da = gy.clone();
                for v in da.data_mut() {
                    *v *= c;
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::MatMulNT(x, w) => {
                let (vx, vw) = (self.nodes[x].value.clone(), self.nodes[w].value.clone());
                let (b, i, o) = (vx.rows(), vx.cols(), vw.rows());
                if self.nodes[x].requires_grad {
                    // dx[b,i] = sum_o gy[b,o] * w[o,i]
                    let mut dx = Tensor::zeros(vec![b, i]);
                    for bi in 0..b {
                        let gr = gy.row(bi);
                        let dr = dx.row_mut(bi);
                        for oi in 0..o {
                            let wr = vw.row(oi);
                            let g = gr[oi];
                            for k in 0..i {
                                dr[k] += g * wr[k];
                            }
                        }
                    }
                    self.macs += (b * i * o) as u64;
                    add_into(grads, &self.nodes, x, dx);
                }
                if self.nodes[w].requires_grad {
                    // dw[o,i] = sum_b gy[b,o] * x[b,i]
                    let mut dw = Tensor::zeros(vec![o, i]);
                    for bi in 0..b {
                        let gr = gy.row(bi);
                        let xr = vx.row(bi);
                        for oi in 0..o {
                            let g = gr[oi];
                            let dr = dw.row_mut(oi);
                            for k in 0..i {
                                dr[k] += g * xr[k];
                            }
                        }
                    }
                    self.macs += (b * i * o) as u64;
                    add_into(grads, &self.nodes, w, dw);
                }
            }
            Op::AddRowVec(x, v) => {
                add_into(grads, &self.nodes, x, gy.clone());
                if self.nodes[v].requires_grad {
                    let cols = self.nodes[v].value.numel();
                    let mut dv = Tensor::zeros(vec![cols]);
                    for bi in 0..gy.rows() {
                        let gr = gy.row(bi);
                        for c in 0..cols {
                            dv.data_mut()[c] += gr[c];
                        }
                    }
                    add_into(grads, &self.nodes, v, dv);
                }
            }
            Op::Relu(a) => {
                let va = self.nodes[a].value.clone();
                let mut da = gy.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(va.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::Tanh(a) => {
                let y = self.nodes[id].value.clone();
                let mut da = gy.clone();
                for (g, &t) in da.data_mut().iter_mut().zip(y.data()) {
                    *g *= 1.0 - t * t;
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::Exp(a) => {
                let y = self.nodes[id].value.clone();
                let mut da = gy.clone();
                for (g, &e) in da.data_mut().iter_mut().zip(y.data()) {
                    *g *= e;
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::LogSoftmaxRows(a) => {
                // da = gy - softmax * rowsum(gy)
                let y = self.nodes[id].value.clone();
                let mut da = gy.clone();
                for bi in 0..y.rows() {
                    let mut rowsum = 0.0;
                    for &g in gy.row(bi) {
                        rowsum += g;
                    }
                    let yr = y.row(bi).to_vec();
                    let dr = da.row_mut(bi);
                    for (d, lp) in dr.iter_mut().zip(yr) {
                        *d -= lp.exp() * rowsum;
                    }
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::NllMean(a, labels) => {
                let b = labels.len();
                let mut da = Tensor::zeros_like(&self.nodes[a].value);
                let g = gy.item() / b as f64;
                for (bi, &y) in labels.iter().enumerate() {
                    let cols = da.cols();
                    da.data_mut()[bi * cols + y] = -g;
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::SumAll(a) => {
                let mut da = Tensor::zeros_like(&self.nodes[a].value);
                let g = gy.item();
                for v in da.data_mut() {
                    *v = g;
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::RowScale(a, weights) => {
                let mut da = gy.clone();
                for bi in 0..da.rows() {
                    for v in da.row_mut(bi) {
                        *v *= weights[bi];
                    }
                }
                add_into(grads, &self.nodes, a, da);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[a].value.cols(), self.nodes[b].value.cols());
                let rows = gy.rows();
                let mut da = Tensor::zeros(vec![rows, ca]);
                let mut db = Tensor::zeros(vec![rows, cb]);
                for bi in 0..rows {
                    let gr = gy.row(bi);
                    da.row_mut(bi).copy_from_slice(&gr[..ca]);
                    db.row_mut(bi).copy_from_slice(&gr[ca..]);
                }
                add_into(grads, &self.nodes, a, da);
                add_into(grads, &self.nodes, b, db);
            }
            Op::GatherRows(table, labels) => {
                let mut dt = Tensor::zeros_like(&self.nodes[table].value);
                let cols = dt.cols();
                for (bi, &y) in labels.iter().enumerate() {
                    let gr = gy.row(bi);
                    let tr = &mut dt.data_mut()[y * cols..(y + 1) * cols];
                    for (t, &g) in tr.iter_mut().zip(gr) {
                        *t += g;
                    }
                }
                add_into(grads, &self.nodes, table, dt);
            }
            Op::PairNormProdSum(s, h) => {
                let (vs, vh) = (self.nodes[s].value.clone(), self.nodes[h].value.clone());
                let b = vs.rows();
                let g = gy.item();
                let need_s = self.nodes[s].requires_grad;
                let need_h = self.nodes[h].requires_grad;
                let mut ds = Tensor::zeros_like(&vs);
                let mut dh = Tensor::zeros_like(&vh);
                for j in 0..b {
                    for k in 0..b {
                        if j == k {
                            continue;
                        }
                        let dist_s = crate::tensor::l2_distance(vs.row(j), vs.row(k));
                        let dist_h = crate::tensor::l2_distance(vh.row(j), vh.row(k));
                        // The term for (j,k) depends on both rows; its row-k
                        // part equals the row-j part of the (k,j) term, so
                        // accumulating 2x into row j over all ordered pairs
                        // covers both.
                        if need_s && dist_s > 0.0 {
                            let coeff = 2.0 * g * dist_h / dist_s;
                            let (row_j, row_k) = (vs.row(j), vs.row(k));
                            let dj = ds.row_mut(j);
                            for c in 0..row_j.len() {
                                dj[c] += coeff * (row_j[c] - row_k[c]);
                            }
                        }
                        if need_h && dist_h > 0.0 {
                            let coeff = 2.0 * g * dist_s / dist_h;
                            let (row_j, row_k) = (vh.row(j), vh.row(k));
                            let dj = dh.row_mut(j);
                            for c in 0..row_j.len() {
                                dj[c] += coeff * (row_j[c] - row_k[c]);
                            }
                        }
                    }
                }
                if need_s {
                    add_into(grads, &self.nodes, s, ds);
                }
                if need_h {
                    add_into(grads, &self.nodes, h, dh);
                }
            }
        }
    }
}

/// Stable softmax of a logits vector; the batched case lives on the tape.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.numel() == 0 || logits.shape().len() != 1 {
        return Err(Error::contract("softmax expects a non-empty vector"));
    }
    if logits.numel() < 2 {
        return Err(Error::contract("softmax needs at least two classes"));
    }
    Tensor::new(vec![logits.numel()], softmax_vec(logits.data()))
}

/// Mean cross-entropy of `[B,C]` logits against labels, without a tape.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, labels)?;
    Ok(tape.value(ce).item())
}

/// Mean KL divergence between softmax rows; first argument supplies `P`.
pub fn kl_div(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(p_logits.clone());
    let q = tape.constant(q_logits.clone());
    let kl = tape.kl_div(p, q)?;
    Ok(tape.value(kl).item())
}
