//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep is a reverse scan. Only the
//! operations the encoder-decoder, CTC head and attention regularizer need
//! are provided.

use std::collections::HashMap;

use crate::param::{LossTerm, ParamId, ParamStore};
use crate::tensor::{dot, log_sum_exp, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant tensor.
    Mask(Var, Tensor),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Elementwise max; `winner[k]` is the index into `inputs` that attained element `k`.
    MaxN {
        inputs: Vec<Var>,
        winner: Vec<usize>,
    },
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar whose gradient with respect to `input` was computed during the forward pass.
    ScalarWithGrad {
        input: Var,
        local_grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    params: Vec<(Var, ParamId)>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradient but is not tied to a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter for use by `term`. Parameters whose update
    /// mask excludes `term` enter the graph as constants, so no gradient
    /// from that use can reach them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, term: LossTerm) -> Var {
        let p = store.get(id);
        if !p.update_mask.admits(term) {
            return self.constant(p.value.clone());
        }
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        self.params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the row vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), b.len(), "add_row width");
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    /// `a * b^T + bias` for a row-batch linear layer with `b: out x in`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul_bt(x, weight);
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product with the constant `mask`, which must match in shape.
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), mask.shape(), "mask shape");
        for (v, m) in value.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::Mask(a, mask), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is excluded.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let live = if causal { (r + 1).min(row.len()) } else { row.len() };
            let m = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row[..live].iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row[..live].iter_mut() {
                *v /= z;
            }
            row[live..].iter_mut().for_each(|v| *v = 0.0);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        let rows = src.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, data);
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let value = Tensor::matrix(
            end - start,
            cols,
            src.data()[start * cols..end * cols].to_vec(),
        );
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::matrix(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Embedding lookup: row `k` of the output is row `ids[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let src = self.value(table);
        let cols = src.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::matrix(ids.len(), cols, data),
            Op::GatherRows(table, ids.to_vec()),
            rg,
        )
    }

    /// Elementwise maximum over same-shaped inputs. Ties go to the earliest
    /// input, which is also the only one that receives gradient.
    pub fn max_n(&mut self, inputs: &[Var]) -> (Var, Vec<usize>) {
        let first = self.value(inputs[0]);
        let mut value = first.clone();
        let mut winner = vec![0usize; first.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            let src = self.value(*v).data();
            for (idx, (cur, &cand)) in value.data_mut().iter_mut().zip(src).enumerate() {
                if cand > *cur {
                    *cur = cand;
                    winner[idx] = k;
                }
            }
        }
        let rg = self.rg(inputs);
        let out = self.push(
            value,
            Op::MaxN {
                inputs: inputs.to_vec(),
                winner: winner.clone(),
            },
            rg,
        );
        (out, winner)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            value.add_scaled(self.value(v), w);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(value, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Records a scalar `value` whose gradient with respect to `input` is `local_grad`.
    pub fn scalar_with_grad(&mut self, input: Var, value: f64, local_grad: Tensor) -> Var {
        assert_eq!(local_grad.shape(), self.value(input).shape());
        let rg = self.rg(&[input]);
        self.push(
            Tensor::vector(vec![value]),
            Op::ScalarWithGrad { input, local_grad },
            rg,
        )
    }

    /// Reverse sweep from the scalar `root`, seeded with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(self.nodes[root.0].value.map(|_| seed));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Runs [`Graph::backward`] and adds the result into the gradients of
    /// every bound parameter.
    pub fn backward_into(&self, root: Var, seed: f64, store: &mut ParamStore) {
        let grads = self.backward(root, seed);
        for &(v, id) in &self.params {
            if let Some(g) = grads.of(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_bt(bv));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(bv));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_at(av));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; g.cols()];
                    for row in g.iter_rows() {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb).expect("bias shape"));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Mask(a, m) => {
                let mut out = g.clone();
                for (o, f) in out.data_mut().iter_mut().zip(m.data()) {
                    *o *= f;
                }
                self.accumulate(grads, *a, out);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut out = g.clone();
                for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                    let u = GELU_K * (xv + GELU_C * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * xv * xv);
                    *o *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let (rows, cols) = (g.rows(), g.cols());
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g.get(r, c) * xhat.get(r, c);
                            db[c] += g.get(r, c);
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gshape, dg).expect("gain"));
                    self.accumulate(grads, *bias, Tensor::new(bshape, db).expect("bias"));
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, xhat.row(r)) / n;
                        for c in 0..cols {
                            let v = inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut out = g.clone();
                for r in 0..p.rows() {
                    let s = dot(p.row(r), g.row(r));
                    for (o, &pv) in out.row_mut(r).iter_mut().zip(p.row(r)) {
                        *o = pv * (*o - s);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LogSoftmax(a) => {
                let lp = &node.value;
                let mut out = g.clone();
                for r in 0..lp.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (o, &l) in out.row_mut(r).iter_mut().zip(lp.row(r)) {
                        *o -= l.exp() * s;
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut out = Tensor::zeros(src.shape());
                for r in 0..g.rows() {
                    out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, out);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut out = Tensor::zeros(src.shape());
                let cols = src.cols();
                out.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::matrix(g.rows(), w, data));
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let mut out = Tensor::zeros(self.value(*table).shape());
                for (k, &i) in ids.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, out);
            }
            Op::MaxN { inputs, winner } => {
                for (k, v) in inputs.iter().enumerate() {
                    if !self.requires_grad(*v) {
                        continue;
                    }
                    let mut out = Tensor::zeros(g.shape());
                    for (idx, o) in out.data_mut().iter_mut().enumerate() {
                        if winner[idx] == k {
                            *o = g.data()[idx];
                        }
                    }
                    self.accumulate(grads, *v, out);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g.map(|x| x * w));
                }
            }
            Op::ScalarWithGrad { input, local_grad } => {
                let s = g.data()[0];
                self.accumulate(grads, *input, local_grad.map(|x| x * s));
            }
        }
    }
}
