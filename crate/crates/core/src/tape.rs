//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed into the tape, so eval-only forward passes cost no copies.
//! Values that do not depend on any gradient-carrying leaf are never
//! visited by [`Tape::backward`].

use std::borrow::Cow;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Norm floor used by the cosine-distance op.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    /// `a · wᵀ`
    MatMulT {
        a: Var,
        w: Var,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MulConst {
        a: Var,
        mask: Array2<f64>,
    },
    Flatten(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    SoftTargetCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        temperature: f64,
        probs: Vec<f64>,
    },
    CosineDistance {
        a: Var,
        target_unit: Vec<f64>,
        norm: f64,
    },
    Distance {
        a: Var,
        target: Vec<f64>,
        dist: f64,
    },
    Relu(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn row_softmax_in_place(mut m: ndarray::ArrayViewMut2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(64) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A gradient-carrying leaf.
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A gradient-carrying leaf that owns its value.
    pub fn param_owned(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: &'a Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Row `i` of `table` for every `i` in `rows`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        self.derived(out, Op::Gather { table, rows: rows.to_vec() }, &[table])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the 1×c `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + r;
        self.derived(out, Op::AddRow { a, row }, &[a, row])
    }

    /// `a · wᵀ`, the layout of a linear layer with weight `w` (out × in).
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let out = self.value(a).dot(&self.value(w).t());
        self.derived(out, Op::MatMulT { a, w }, &[a, w])
    }

    /// `a · wᵀ + bias`
    pub fn linear(&mut self, a: Var, w: Var, bias: Var) -> Var {
        let z = self.matmul_t(a, w);
        self.add_row(z, bias)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.derived(out, Op::SelectRows { a, rows: rows.to_vec() }, &[a])
    }

    /// Multi-head scaled dot-product attention. `q` is m×D, `k` and `v` are
    /// n×D; head `i` uses columns `i*D/heads .. (i+1)*D/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert!(heads > 0 && dim % heads == 0, "model dim must divide into heads");
        let dk = dim / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), dim));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = ndarray::s![.., h * dk..(h + 1) * dk];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            row_softmax_in_place(scores.view_mut());
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        self.derived(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Row-wise layer normalisation with gain and bias (both 1×c). A row with
    /// zero variance normalises to zero and therefore maps to `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = x.ncols() as f64;
        let mut xhat = Array2::zeros(x.dim());
        let mut inv_std = Vec::with_capacity(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let out = &xhat * g + b;
        self.derived(out, Op::LayerNorm { a, gain, bias, xhat, inv_std }, &[a, gain, bias])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.derived(out, Op::Gelu(a), &[a])
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let out = self.value(a) * &mask;
        self.derived(out, Op::MulConst { a, mask }, &[a])
    }

    /// Row-major reshape into a single row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let flat: Vec<f64> = src.iter().copied().collect();
        let out = Array2::from_shape_vec((1, flat.len()), flat).expect("flatten shape");
        self.derived(out, Op::Flatten(a), &[a])
    }

    /// `-log softmax(logits)[label]` for a 1×C logit row, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), 1);
        assert!(label < l.ncols(), "label out of range");
        let row: Vec<f64> = l.iter().copied().collect();
        let lse = log_sum_exp(&row);
        let probs: Vec<f64> = row.iter().map(|&x| (x - lse).exp()).collect();
        let value = lse - row[label];
        self.derived(scalar(value), Op::CrossEntropy { logits, label, probs }, &[logits])
    }

    /// Cross-entropy of constant soft `targets` against the temperature
    /// softened softmax of the first `targets.len()` logits:
    /// `-Σ_r t_r · log softmax(logits[..m] / T)_r`.
    pub fn soft_target_cross_entropy(&mut self, logits: Var, targets: Vec<f64>, temperature: f64) -> Var {
        let l = self.value(logits);
        let m = targets.len();
        assert!(l.nrows() == 1 && m <= l.ncols(), "logit row narrower than targets");
        let z: Vec<f64> = l.iter().take(m).map(|&x| x / temperature).collect();
        let lse = log_sum_exp(&z);
        let probs: Vec<f64> = z.iter().map(|&x| (x - lse).exp()).collect();
        let value = -targets.iter().zip(&z).map(|(&t, &zi)| t * (zi - lse)).sum::<f64>();
        let op = Op::SoftTargetCrossEntropy { logits, targets, temperature, probs };
        self.derived(scalar(value), op, &[logits])
    }

    /// `1 - â·t̂` between the 1×D row `a` and a constant target, both
    /// normalised with norms floored at [`NORM_FLOOR`].
    pub fn cosine_distance(&mut self, a: Var, target: &[f64]) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), target.len(), "cosine distance dimension mismatch");
        let tn = target.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        let target_unit: Vec<f64> = target.iter().map(|x| x / tn).collect();
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = av.iter().zip(&target_unit).map(|(x, t)| x * t).sum();
        let value = 1.0 - dot / norm.max(NORM_FLOOR);
        self.derived(scalar(value), Op::CosineDistance { a, target_unit, norm }, &[a])
    }

    /// Euclidean distance between the row `a` and a constant target.
    pub fn distance(&mut self, a: Var, target: &[f64]) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), target.len(), "distance dimension mismatch");
        let dist = av.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>().sqrt();
        self.derived(scalar(dist), Op::Distance { a, target: target.to_vec(), dist }, &[a])
    }

    /// `max(0, a)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.derived(out, Op::Relu(a), &[a])
    }

    /// `Σ w_i · x_i` over same-shaped inputs, accumulated in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted sum of nothing");
        let mut out = self.value(terms[0].0) * terms[0].1;
        for &(v, w) in &terms[1..] {
            out.scaled_add(w, self.value(v));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.derived(out, Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean(&mut self, items: &[Var]) -> Var {
        let w = 1.0 / items.len() as f64;
        let terms: Vec<(Var, f64)> = items.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&terms)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, rows } => {
                let mut dt = Array2::zeros(self.value(*table).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = dt.row_mut(r);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, summed);
            }
            Op::MatMulT { a, w } => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*w)));
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, g.t().dot(self.value(*a)));
                }
            }
            Op::SelectRows { a, rows } => {
                let mut da = Array2::zeros(self.value(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = da.row_mut(r);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dk = qv.ncols() / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dkm = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = ndarray::s![.., h * dk..(h + 1) * dk];
                    let go = g.slice(cols);
                    // out_h = P · V_h
                    let dp = go.dot(&vv.slice(cols).t());
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    // softmax backward, then the 1/sqrt(dk) scale
                    let mut ds = p * &dp;
                    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let s = row.sum();
                        row.zip_mut_with(&prow, |x, &pi| *x = (*x - pi * s) * scale);
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dkm.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dkm);
                self.accumulate(grads, *v, dv);
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                if self.requires_grad(*gain) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires_grad(*bias) {
                    self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.requires_grad(*a) {
                    let n = xhat.ncols() as f64;
                    let dxhat = g * gv;
                    let mut da = Array2::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let (dr, xr) = (dxhat.row(i), xhat.row(i));
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        let scale = inv_std[i] / n;
                        for j in 0..xhat.ncols() {
                            da[[i, j]] = scale * (n * dr[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Gelu(a) => {
                let mut da = self.value(*a).mapv(gelu_grad);
                da *= g;
                self.accumulate(grads, *a, da);
            }
            Op::MulConst { a, mask } => {
                self.accumulate(grads, *a, g * mask);
            }
            Op::Flatten(a) => {
                let shape = self.value(*a).dim();
                let da = Array2::from_shape_vec(shape, g.iter().copied().collect())
                    .expect("flatten backward shape");
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let up = g[[0, 0]];
                let mut d = Array2::from_shape_vec((1, probs.len()), probs.clone()).unwrap();
                d[[0, *label]] -= 1.0;
                d.mapv_inplace(|x| x * up);
                self.accumulate(grads, *logits, d);
            }
            Op::SoftTargetCrossEntropy { logits, targets, temperature, probs } => {
                let up = g[[0, 0]];
                let mut d = Array2::zeros(self.value(*logits).dim());
                for (r, (&p, &t)) in probs.iter().zip(targets).enumerate() {
                    d[[0, r]] = up * (p - t) / temperature;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::CosineDistance { a, target_unit, norm } => {
                let up = g[[0, 0]];
                let av = self.value(*a);
                let d = if *norm > NORM_FLOOR {
                    let dot: f64 = av.iter().zip(target_unit).map(|(x, t)| x * t).sum();
                    let c = dot / (norm * norm);
                    let mut d = av.mapv(|x| x * c);
                    for (x, t) in d.iter_mut().zip(target_unit) {
                        *x = up * (*x - t) / norm;
                    }
                    d
                } else {
                    let mut d = Array2::zeros(av.dim());
                    for (x, t) in d.iter_mut().zip(target_unit) {
                        *x = -up * t / NORM_FLOOR;
                    }
                    d
                };
                self.accumulate(grads, *a, d);
            }
            Op::Distance { a, target, dist } => {
                let up = g[[0, 0]];
                let av = self.value(*a);
                let mut d = Array2::zeros(av.dim());
                if *dist > 0.0 {
                    for ((x, &ai), &t) in d.iter_mut().zip(av.iter()).zip(target) {
                        *x = up * (ai - t) / dist;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut da = g.clone();
                da.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g * w);
                }
            }
        }
    }
}
