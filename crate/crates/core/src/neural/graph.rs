//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter leaves are
//! read from a borrowed [`ParamStore`]; only parameters whose group is marked
//! trainable propagate gradients, so frozen components cost a forward pass
//! and nothing more.

use std::collections::HashMap;

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{Mat, Real};

const LN_EPS: f64 = 1e-5;
/// Probability clamp used by the binary cross-entropy node.
pub const BCE_EPS: f64 = 1e-7;
/// Floor applied to teacher probabilities inside the KL node.
pub const KL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { a: Var, causal: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat<T>, rstd: Vec<T> },
    Embed { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat<T> },
    Bce { probs: Var, labels: Vec<T> },
    KlFromLogits { logits: Var, s: Vec<T>, log_ratio: Vec<T> },
    L2NormalizeRows { a: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    trainable: [bool; 3],
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients for every node of a graph after [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }
}

fn group_slot(g: ParamGroup) -> usize {
    match g {
        ParamGroup::EntitySelector => 0,
        ParamGroup::AttributeSelector => 1,
        ParamGroup::Generator => 2,
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph in which no parameter receives gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::new(store, &[])
    }

    pub fn new(store: &'s ParamStore<T>, trainable: &[ParamGroup]) -> Self {
        let mut flags = [false; 3];
        for g in trainable {
            flags[group_slot(*g)] = true;
        }
        Self {
            store,
            trainable: flags,
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group_slot(group)]
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Const, false)
    }

    /// A leaf that receives a gradient regardless of parameter groups. Used by
    /// gradient checks on loss inputs.
    pub fn input(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Const, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let needs = self.trainable[group_slot(p.group)];
        let v = self.push(p.value.clone(), Op::Param, needs);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Mat::matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape mismatch");
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, value.cols), b.shape(), "bias shape mismatch");
        for r in 0..value.rows {
            for (x, &y) in value.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut value = self.value(a).clone();
        value.scale(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| gelu(x)).collect();
        let value = Mat::from_vec(v.rows, v.cols, data);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| super::tensor::sigmoid(x)).collect();
        let value = Mat::from_vec(v.rows, v.cols, data);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let v = self.value(a);
        let mut out = Mat::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let width = if causal { (r + 1).min(v.cols) } else { v.cols };
            let p = super::tensor::softmax(&v.row(r)[..width]);
            out.row_mut(r)[..width].copy_from_slice(&p);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax { a, causal }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let v = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, v.cols));
        let n = T::from_usize(v.cols).unwrap();
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = Mat::zeros(v.rows, v.cols);
        let mut out = Mat::zeros(v.rows, v.cols);
        let mut rstd = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..v.cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Gathers rows of `table` by index.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.rows, "embedding index {id} out of range {}", t.rows);
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let ng = self.ng(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows, "slice_rows out of bounds");
        let data = v.data[start * v.cols..(start + len) * v.cols].to_vec();
        let value = Mat::from_vec(len, v.cols, data);
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "slice_cols out of bounds");
        let mut out = Mat::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Mat::scalar(s), Op::Sum(a), ng)
    }

    /// Sum over rows of `-log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows, targets.len(), "one target per logit row");
        let mut probs = Mat::zeros(v.rows, v.cols);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let lp = super::tensor::log_softmax(v.row(r));
            loss -= lp[t];
            for (p, l) in probs.row_mut(r).iter_mut().zip(lp) {
                *p = l.exp();
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with the
    /// probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, probs: Var, labels: &[T]) -> Var {
        let v = self.value(probs);
        assert_eq!(v.len(), labels.len(), "one label per probability");
        let loss = bce_value(&v.data, labels);
        let ng = self.ng(&[probs]);
        self.push(
            Mat::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// `KL(softmax(logits) ‖ target)` for a `1 × K` logit row and a fixed
    /// target distribution.
    pub fn kl_from_logits(&mut self, logits: Var, target: &[T]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.len(), target.len(), "KL operands must have equal length");
        let s = super::tensor::softmax(&v.data);
        let ls = super::tensor::log_softmax(&v.data);
        let floor = T::from_f64_lossy(KL_EPS);
        let log_ratio: Vec<T> = ls
            .iter()
            .zip(target)
            .map(|(&l, &c)| l - c.max(floor).ln())
            .collect();
        let loss = s
            .iter()
            .zip(&log_ratio)
            .filter(|(&p, _)| p > T::zero())
            .map(|(&p, &r)| p * r)
            .sum();
        let ng = self.ng(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::KlFromLogits {
                logits,
                s,
                log_ratio,
            },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows);
        let floor = T::from_f64_lossy(1e-12);
        for r in 0..v.rows {
            let n = v.row(r).iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
            norms.push(n);
            for x in out.row_mut(r) {
                *x = *x / n;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::L2NormalizeRows { a, norms }, ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    /// Parameter gradients keyed by id, in ascending id order.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Mat<T>)> {
        let mut out: Vec<(ParamId, Mat<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.wrt(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn accum(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Mat<T>>], v: Var, f: impl FnOnce(&mut Mat<T>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Const | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // y = A'B' with A' = op(A), B' = op(B)
                if self.needs_grad(*a) {
                    self.accum_with(grads, *a, |ga| {
                        if *ta {
                            // dA = B' · dYᵀ
                            Mat::gemm_into(vb, *tb, dy, true, ga, T::one());
                        } else {
                            // dA = dY · B'ᵀ
                            Mat::gemm_into(dy, false, vb, !*tb, ga, T::one());
                        }
                    });
                }
                if self.needs_grad(*b) {
                    self.accum_with(grads, *b, |gb| {
                        if *tb {
                            // dB = dYᵀ · A'
                            Mat::gemm_into(dy, true, va, *ta, gb, T::one());
                        } else {
                            // dB = A'ᵀ · dY
                            Mat::gemm_into(va, !*ta, dy, false, gb, T::one());
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::AddRow(a, bias) => {
                self.accum(grads, *a, dy.clone());
                self.accum_with(grads, *bias, |gb| {
                    for r in 0..dy.rows {
                        for (g, &d) in gb.data.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum_with(grads, *a, |g| {
                    for ((g, &d), &y) in g.data.iter_mut().zip(&dy.data).zip(&vb.data) {
                        *g += d * y;
                    }
                });
                self.accum_with(grads, *b, |g| {
                    for ((g, &d), &x) in g.data.iter_mut().zip(&dy.data).zip(&va.data) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let mut g = dy.clone();
                g.scale(*s);
                self.accum(grads, *a, g);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accum_with(grads, *a, |g| {
                    for ((g, &d), &x) in g.data.iter_mut().zip(&dy.data).zip(&x.data) {
                        *g += d * gelu_grad(x);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum_with(grads, *a, |g| {
                    for ((g, &d), &y) in g.data.iter_mut().zip(&dy.data).zip(&y.data) {
                        *g += d * y * (T::one() - y);
                    }
                });
            }
            Op::Softmax { a, causal } => {
                let y = &node.value;
                self.accum_with(grads, *a, |g| {
                    for r in 0..y.rows {
                        let width = if *causal { (r + 1).min(y.cols) } else { y.cols };
                        let yr = &y.row(r)[..width];
                        let dr = &dy.row(r)[..width];
                        let inner: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        let gr = &mut g.row_mut(r)[..width];
                        for ((g, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += p * (d - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let n = T::from_usize(xhat.cols).unwrap();
                self.accum_with(grads, *gain, |gg| {
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            gg.data[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                });
                self.accum_with(grads, *bias, |gb| {
                    for r in 0..dy.rows {
                        for (g, &d) in gb.data.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                });
                self.accum_with(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); xhat.cols];
                    for r in 0..dy.rows {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..xhat.cols {
                            let d = dy.get(r, c) * gv.data[c];
                            dxhat[c] = d;
                            sum_d += d;
                            sum_dx += d * xhat.get(r, c);
                        }
                        let scale = rstd[r] / n;
                        for c in 0..xhat.cols {
                            let v = scale * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                            gx.data[r * xhat.cols + c] += v;
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                self.accum_with(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (g, &d) in gt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.needs_grad(p) {
                        let cols = dy.cols;
                        let data = dy.data[row * cols..(row + rows) * cols].to_vec();
                        self.accum(grads, p, Mat::from_vec(rows, cols, data));
                    }
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.needs_grad(p) {
                        let mut g = Mat::zeros(dy.rows, cols);
                        for r in 0..dy.rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        self.accum(grads, p, g);
                    }
                    off += cols;
                }
            }
            Op::SliceRows { a, start } => {
                let cols = dy.cols;
                self.accum_with(grads, *a, |g| {
                    let base = start * cols;
                    for (g, &d) in g.data[base..base + dy.len()].iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                self.accum_with(grads, *a, |g| {
                    for r in 0..dy.rows {
                        let gr = &mut g.row_mut(r)[*start..*start + dy.cols];
                        for (g, &d) in gr.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = dy.data[0];
                self.accum_with(grads, *a, |g| {
                    for g in &mut g.data {
                        *g += d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let d = dy.data[0];
                self.accum_with(grads, *logits, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = probs.row(r);
                        let gr = g.row_mut(r);
                        for (c, (g, &p)) in gr.iter_mut().zip(pr).enumerate() {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            *g += d * (p - onehot);
                        }
                    }
                });
            }
            Op::Bce { probs, labels } => {
                let d = dy.data[0];
                let p = self.value(*probs);
                let n = T::from_usize(labels.len()).unwrap();
                let eps = T::from_f64_lossy(BCE_EPS);
                self.accum_with(grads, *probs, |g| {
                    for ((g, &a), &b) in g.data.iter_mut().zip(&p.data).zip(labels) {
                        if a <= eps || a >= T::one() - eps {
                            continue;
                        }
                        *g += d * (a - b) / (a * (T::one() - a)) / n;
                    }
                });
            }
            Op::KlFromLogits {
                logits,
                s,
                log_ratio,
            } => {
                let d = dy.data[0];
                let loss = node.value.data[0];
                self.accum_with(grads, *logits, |g| {
                    for ((g, &p), &r) in g.data.iter_mut().zip(s).zip(log_ratio) {
                        *g += d * p * (r - loss);
                    }
                });
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.value;
                self.accum_with(grads, *a, |g| {
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let inner: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        let n = norms[r];
                        for ((g, &p), &d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *g += (d - p * inner) / n;
                        }
                    }
                });
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Mean clamped binary cross-entropy; shared by the graph node and the pure
/// loss function.
pub fn bce_value<T: Real>(probs: &[T], labels: &[T]) -> T {
    let eps = T::from_f64_lossy(BCE_EPS);
    let n = T::from_usize(probs.len().max(1)).unwrap();
    let total: T = probs
        .iter()
        .zip(labels)
        .map(|(&a, &b)| {
            let a = a.max(eps).min(T::one() - eps);
            -(b * a.ln() + (T::one() - b) * (T::one() - a).ln())
        })
        .sum();
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::ParamStore;

    fn fd<F: Fn(&Mat<f64>) -> f64>(f: F, x: &Mat<f64>) -> Mat<f64> {
        let eps = 1e-6;
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn check_unary(build: impl Fn(&mut Graph<f64>, Var) -> Var, x: Mat<f64>) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = build(&mut g, xv);
        let grads = g.backward(y);
        let analytic = grads.wrt(xv).unwrap().clone();
        let numeric = fd(
            |m| {
                let mut g = Graph::inference(&store);
                let xv = g.input(m.clone());
                let y = build(&mut g, xv);
                g.scalar(y)
            },
            &x,
        );
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < 1e-5 || (a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn softmax_causal_gradient() {
        let w = sample(4, 4, 3);
        check_unary(
            move |g, x| {
                let p = g.softmax_rows(x, true);
                let c = g.constant(w.clone());
                let m = g.mul(p, c);
                g.sum(m)
            },
            sample(4, 4, 1),
        );
    }

    #[test]
    fn layer_norm_gradient() {
        let w = sample(3, 5, 9);
        check_unary(
            move |g, x| {
                let gain = g.input(Mat::from_vec(1, 5, vec![1.0, 0.5, -0.3, 2.0, 0.1]));
                let bias = g.input(Mat::from_vec(1, 5, vec![0.1; 5]));
                let y = g.layer_norm(x, gain, bias);
                let c = g.constant(w.clone());
                let m = g.mul(y, c);
                g.sum(m)
            },
            sample(3, 5, 2),
        );
    }

    #[test]
    fn matmul_transposes_gradient() {
        let b = sample(3, 4, 5);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let bm = if tb {
                sample(4, 3, 5)
            } else {
                b.clone()
            };
            let x = if ta { sample(3, 2, 4) } else { sample(2, 3, 4) };
            check_unary(
                move |g, x| {
                    let bv = g.input(bm.clone());
                    let y = g.matmul_t(x, ta, bv, tb);
                    let y = g.gelu(y);
                    g.sum(y)
                },
                x,
            );
        }
    }

    #[test]
    fn cross_entropy_and_l2_gradient() {
        check_unary(
            |g, x| {
                let n = g.l2_normalize_rows(x);
                let s = g.scale(n, 3.0);
                g.cross_entropy_sum(s, &[1, 0, 3])
            },
            sample(3, 4, 8),
        );
    }

    #[test]
    fn kl_node_gradient() {
        check_unary(
            |g, x| g.kl_from_logits(x, &[0.1, 0.2, 0.3, 0.4]),
            sample(1, 4, 11),
        );
    }

    #[test]
    fn bce_sigmoid_gradient() {
        check_unary(
            |g, x| {
                let p = g.sigmoid(x);
                g.bce_mean(p, &[1.0, 0.0, 1.0, 0.0, 1.0])
            },
            sample(1, 5, 12),
        );
    }

    #[test]
    fn slicing_concat_embed_gradient() {
        check_unary(
            |g, x| {
                let a = g.slice_rows(x, 1, 2);
                let b = g.slice_cols(x, 0, 2);
                let c = g.embed(x, &[0, 2, 2]);
                let ab = g.concat_rows(&[a, c]);
                let ab = g.slice_cols(ab, 0, 2);
                let both = g.concat_cols(&[b, b]);
                let s1 = g.sum(ab);
                let both = g.sigmoid(both);
                let s2 = g.sum(both);
                let total = g.add(s1, s2);
                let bias = g.input(Mat::from_vec(1, 1, vec![0.3]));
                let t = g.add_row(total, bias);
                g.mul(t, t)
            },
            sample(3, 3, 13),
        );
    }
}
