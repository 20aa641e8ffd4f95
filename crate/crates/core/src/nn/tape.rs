//! Reverse-mode autodiff over 2-D tensors. Build a graph on a fresh [`Tape`]
//! per forward pass, call [`Tape::backward`] on a scalar node, then pull
//! parameter gradients out with [`Tape::param_grads`].

use std::collections::HashMap;

use super::tensor::{dot, softmax_in_place, Tensor};

pub type ParamId = usize;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.tensors.push(t);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One teacher-forced or policy-gradient step: `weight * -log p(target)`
/// where `p` is the softmax restricted to `candidates`.
#[derive(Debug, Clone)]
pub struct NllRow {
    pub candidates: Vec<usize>,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax { x: Var, scale: f64, causal: bool },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, idx: Vec<usize> },
    MeanRows(Var),
    Sum(Vec<Var>),
    MaskedNll { logits: Var, rows: Vec<NllRow>, probs: Vec<Vec<f64>>, norm: f64 },
    BceLogit { z: Var, target: f64, weight: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mu) * inv + beta[i];
    }
    (mu, inv)
}

pub(crate) fn gelu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = gelu(*x));
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; its gradient is still available after backward.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.tensors[id].clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let bias = self.value(b);
        debug_assert_eq!((1, v.cols), bias.shape());
        for i in 0..v.rows {
            for (x, y) in v.row_mut(i).iter_mut().zip(&bias.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddBias(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        gelu_in_place(&mut v.data);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for i in 0..xv.rows {
            let (mu, inv) = layer_norm_row(xv.row(i), g, b, out.row_mut(i));
            for (h, &v) in xhat.row_mut(i).iter_mut().zip(xv.row(i)) {
                *h = (v - mu) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row softmax of `scale * x`; with `causal`, entries above the diagonal are excluded.
    pub fn softmax(&mut self, x: Var, scale: f64, causal: bool) -> Var {
        let mut v = self.value(x).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let limit = if causal { i + 1 } else { row.len() };
            row.iter_mut().for_each(|e| *e *= scale);
            softmax_in_place(&mut row[..limit]);
            row[limit..].iter_mut().for_each(|e| *e = 0.0);
        }
        self.push(v, Op::Softmax { x, scale, causal })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, len);
        for i in 0..xv.rows {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                v.row_mut(i)[off..off + pv.cols].copy_from_slice(pv.row(i));
                off += pv.cols;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            debug_assert_eq!(self.value(*p).cols, cols);
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols;
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Tensor::zeros(idx.len(), t.cols);
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(v, Op::Gather { table, idx: idx.to_vec() })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(1, xv.cols);
        for i in 0..xv.rows {
            for (a, b) in v.data.iter_mut().zip(xv.row(i)) {
                *a += b;
            }
        }
        v.scale(1.0 / xv.rows as f64);
        self.push(v, Op::MeanRows(x))
    }

    /// Sum of `1 x 1` nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|p| self.value(*p).item()).sum();
        self.push(Tensor::scalar(s), Op::Sum(parts.to_vec()))
    }

    /// `sum_t weight_t * -log softmax_{candidates_t}(logits_t)[target_t] / norm`.
    pub fn masked_nll(&mut self, logits: Var, rows: Vec<NllRow>, norm: f64) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.rows, rows.len());
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let row = lv.row(i);
            let mut p: Vec<f64> = r.candidates.iter().map(|&c| row[c]).collect();
            softmax_in_place(&mut p);
            let k = r.candidates.iter().position(|&c| c == r.target).expect("target among candidates");
            total += r.weight * -p[k].max(f64::MIN_POSITIVE).ln();
            probs.push(p);
        }
        self.push(Tensor::scalar(total / norm), Op::MaskedNll { logits, rows, probs, norm })
    }

    /// `weight * BCE(sigmoid(z), target)` for a `1 x 1` logit.
    pub fn bce_logit(&mut self, z: Var, target: f64, weight: f64) -> Var {
        let zv = self.value(z).item();
        let loss = weight * (softplus(zv) - target * zv);
        self.push(Tensor::scalar(loss), Op::BceLogit { z, target, weight })
    }

    fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from a `1 x 1` node with seed gradient `seed`.
    pub fn backward_with(&mut self, root: Var, seed: f64) {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(seed));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    Self::acc(&mut grads, *a, g.matmul_bt(val(*b)));
                    Self::acc(&mut grads, *b, val(*a).matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    Self::acc(&mut grads, *a, g.matmul(val(*b)));
                    Self::acc(&mut grads, *b, g.matmul_at(val(*a)));
                }
                Op::Add(a, b) => {
                    Self::acc(&mut grads, *b, g.clone());
                    Self::acc(&mut grads, *a, g.clone());
                }
                Op::AddBias(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    Self::acc(&mut grads, *b, gb);
                    Self::acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(&val(*b).data) {
                        *x *= y;
                    }
                    let mut gb = g.clone();
                    for (x, y) in gb.data.iter_mut().zip(&val(*a).data) {
                        *x *= y;
                    }
                    Self::acc(&mut grads, *a, ga);
                    Self::acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.scale(*s);
                    Self::acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    for (x, &inp) in ga.data.iter_mut().zip(&val(*a).data) {
                        *x *= gelu_grad(inp);
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = &val(*gamma).data;
                    let n = g.cols as f64;
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    let mut gg = Tensor::zeros(1, g.cols);
                    let mut gbeta = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / n;
                        let m2 = dot(&dh, hr) / n;
                        for j in 0..g.cols {
                            gx.data[r * g.cols + j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                            gg.data[j] += gr[j] * hr[j];
                            gbeta.data[j] += gr[j];
                        }
                    }
                    Self::acc(&mut grads, *x, gx);
                    Self::acc(&mut grads, *gamma, gg);
                    Self::acc(&mut grads, *beta, gbeta);
                }
                Op::Softmax { x, scale, causal } => {
                    let s = &node.value;
                    let mut gx = Tensor::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        let limit = if *causal { r + 1 } else { s.cols };
                        let (sr, gr) = (&s.row(r)[..limit], &g.row(r)[..limit]);
                        let d = dot(sr, gr);
                        for j in 0..limit {
                            gx.data[r * s.cols + j] = scale * sr[j] * (gr[j] - d);
                        }
                    }
                    Self::acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    Self::acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = val(*p).cols;
                        let mut gp = Tensor::zeros(g.rows, c);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        off += c;
                        Self::acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).len();
                        let rows = val(*p).rows;
                        Self::acc(&mut grads, *p, Tensor::from_vec(rows, g.cols, g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::Gather { table, idx } => {
                    let t = val(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (i, &r) in idx.iter().enumerate() {
                        for (x, y) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    Self::acc(&mut grads, *table, gt);
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    let inv = 1.0 / xv.rows as f64;
                    for r in 0..xv.rows {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(&g.data) {
                            *a = b * inv;
                        }
                    }
                    Self::acc(&mut grads, *x, gx);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        Self::acc(&mut grads, *p, g.clone());
                    }
                }
                Op::MaskedNll { logits, rows, probs, norm } => {
                    let lv = val(*logits);
                    let mut gl = Tensor::zeros(lv.rows, lv.cols);
                    let s = g.item() / norm;
                    for (i, (r, p)) in rows.iter().zip(probs).enumerate() {
                        for (k, &c) in r.candidates.iter().enumerate() {
                            let ind = if c == r.target { 1.0 } else { 0.0 };
                            gl.data[i * lv.cols + c] += s * r.weight * (p[k] - ind);
                        }
                    }
                    Self::acc(&mut grads, *logits, gl);
                }
                Op::BceLogit { z, target, weight } => {
                    let zv = val(*z).item();
                    Self::acc(&mut grads, *z, Tensor::scalar(g.item() * weight * (sigmoid(zv) - target)));
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    pub fn backward(&mut self, root: Var) {
        self.backward_with(root, 1.0);
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds `scale *` each parameter gradient into `into`.
    pub fn accumulate_param_grads(&self, into: &mut [Tensor], scale: f64) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                into[id].add_scaled(g, scale);
            }
        }
    }
}
