//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape and enter it through [`Tape::param`];
//! [`Tape::backward`] returns one gradient slot per stored parameter.

use std::rc::Rc;

use rand::Rng;

use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        src: Var,
        ids: Rc<Vec<usize>>,
    },
    Permute {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Tensor,
    },
    MeanSquare(Var),
    WeightedSum(Vec<(Var, f64)>),
    StraightThrough {
        h: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter of a [`ParamStore`]; `None` when the
/// parameter did not take part in the loss.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn slots(&self) -> &[Option<Tensor>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Option<Tensor>] {
        &mut self.slots
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: Grads) {
        for (mine, theirs) in self.slots.iter_mut().zip(other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::all_finite)
    }
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values, i.e. the activations retained for backward.
    pub fn activation_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.bytes()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) @ op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = Tensor::zeros(m, n);
        gemm(av, ta, bv, tb, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.input(Tensor::from_vec(r, c, mask));
        self.mul(a, m)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for i in 0..rows {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g.data()[j] + b.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row-wise softmax. Entries with `mask[i * cols + j] == false` get zero
    /// probability; every row must keep at least one entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let allowed = |j: usize| mask.is_none_or(|m| m[i * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// `out[i] = src[ids[i]]` over rows.
    pub fn gather_rows(&mut self, src: Var, ids: Rc<Vec<usize>>) -> Var {
        let sv = self.value(src);
        let cols = sv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids.iter() {
            data.extend_from_slice(sv.row(id));
        }
        let out = Tensor::from_vec(ids.len(), cols, data);
        let ng = self.ng(src);
        self.push(out, Op::GatherRows { src, ids }, ng)
    }

    /// Flat gather `out.data[i] = x.data[idx[i]]` reshaped to `rows x cols`.
    /// Used for patchify/unpatchify, which are permutations.
    pub fn permute(&mut self, x: Var, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(idx.len(), rows * cols);
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::from_vec(rows, cols, data);
        let ng = self.ng(x);
        self.push(out, Op::Permute { x, idx }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let mut out = Tensor::zeros(rows, len);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Mean categorical cross-entropy of row-wise logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        assert_eq!(rows, targets.len(), "cross_entropy target count mismatch");
        let mut probs = Tensor::zeros(rows, cols);
        let mut total = 0.0;
        for i in 0..rows {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[i]];
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let mean = if rows == 0 { 0.0 } else { total / rows as f64 };
        let ng = self.ng(logits);
        self.push(Tensor::scalar(mean), Op::CrossEntropy { logits, targets, probs }, ng)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let v = av.data().iter().map(|x| x * x).sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::MeanSquare(a), ng)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(s, w)| self.value(s).scalar_value() * w).sum();
        let ng = terms.iter().any(|&(s, _)| self.ng(s));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Forward value of `q`, gradient routed unchanged to `h`.
    pub fn straight_through(&mut self, h: Var, q: Var) -> Var {
        assert_eq!(self.shape(h), self.shape(q));
        let value = self.value(q).clone();
        let ng = self.ng(h);
        self.push(value, Op::StraightThrough { h }, ng)
    }

    /// Differentiates the scalar `loss` and returns parameter gradients.
    pub fn backward(mut self, loss: Var, store: &ParamStore) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Input);
            match op {
                Op::Input => {}
                Op::Param(id) => out.slots[id.0] = Some(g),
                Op::MatMul { a, b, ta, tb } => {
                    if self.ng(a) {
                        let av = self.value(a);
                        let mut ga = Tensor::zeros(av.rows(), av.cols());
                        let bv = self.value(b);
                        // C = op(A) op(B):  dA = dC op(B)^T  (or its transpose when ta)
                        if ta {
                            gemm(bv, tb, &g, true, &mut ga, 0.0);
                        } else {
                            gemm(&g, false, bv, !tb, &mut ga, 0.0);
                        }
                        acc(&mut grads, a, ga);
                    }
                    if self.ng(b) {
                        let bv = self.value(b);
                        let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                        let av = self.value(a);
                        if tb {
                            gemm(&g, true, av, ta, &mut gb, 0.0);
                        } else {
                            gemm(av, !ta, &g, false, &mut gb, 0.0);
                        }
                        acc(&mut grads, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(b) {
                        acc(&mut grads, b, g.clone());
                    }
                    if self.ng(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(b) {
                        acc(&mut grads, b, g.map(|v| -v));
                    }
                    if self.ng(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(a) {
                        let ga = zip(&g, self.value(b), |x, y| x * y);
                        acc(&mut grads, a, ga);
                    }
                    if self.ng(b) {
                        let gb = zip(&g, self.value(a), |x, y| x * y);
                        acc(&mut grads, b, gb);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.ng(bias) {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, bias, gb);
                    }
                    if self.ng(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, a, g.map(|v| v * f)),
                Op::Gelu(a) => {
                    let ga = zip(&g, self.value(a), |gv, x| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * d
                    });
                    acc(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip(&g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = xhat.shape();
                    if self.ng(gamma) || self.ng(beta) {
                        let mut gg = Tensor::zeros(1, cols);
                        let mut gbeta = Tensor::zeros(1, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                                gbeta.data_mut()[j] += g.get(i, j);
                            }
                        }
                        if self.ng(gamma) {
                            acc(&mut grads, gamma, gg);
                        }
                        if self.ng(beta) {
                            acc(&mut grads, beta, gbeta);
                        }
                    }
                    if self.ng(x) {
                        let gam = self.value(gamma).data().to_vec();
                        let mut gx = Tensor::zeros(rows, cols);
                        let n = cols as f64;
                        for i in 0..rows {
                            let gh: Vec<f64> = (0..cols).map(|j| g.get(i, j) * gam[j]).collect();
                            let xh = xhat.row(i);
                            let mean_gh = gh.iter().sum::<f64>() / n;
                            let mean_ghx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                            for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                                *o = rstd[i] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                            }
                        }
                        acc(&mut grads, x, gx);
                    }
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = y.get(i, j) * (g.get(i, j) - dot);
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                Op::GatherRows { src, ids } => {
                    let (rows, cols) = self.shape(src);
                    let mut gs = Tensor::zeros(rows, cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gs.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, src, gs);
                }
                Op::Permute { x, idx: map } => {
                    let (rows, cols) = self.shape(x);
                    let mut gx = Tensor::zeros(rows, cols);
                    for (i, &src) in map.iter().enumerate() {
                        gx.data_mut()[src] += g.data()[i];
                    }
                    acc(&mut grads, x, gx);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.shape(p).0;
                        if self.ng(p) {
                            let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            acc(&mut grads, p, Tensor::from_vec(rows, cols, data));
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.ng(p) {
                            let mut gp = Tensor::zeros(rows, cols);
                            for i in 0..rows {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.shape(x);
                    let mut gx = Tensor::zeros(rows, cols);
                    gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(x);
                    let mut gx = Tensor::zeros(rows, cols);
                    for i in 0..rows {
                        gx.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let rows = probs.rows();
                    let scale = g.scalar_value() / rows.max(1) as f64;
                    let mut gl = probs;
                    for (i, &t) in targets.iter().enumerate() {
                        gl.row_mut(i)[t] -= 1.0;
                    }
                    for v in gl.data_mut() {
                        *v *= scale;
                    }
                    acc(&mut grads, logits, gl);
                }
                Op::MeanSquare(a) => {
                    let av = self.value(a);
                    let f = 2.0 * g.scalar_value() / av.len().max(1) as f64;
                    acc(&mut grads, a, av.map(|v| v * f));
                }
                Op::WeightedSum(terms) => {
                    let gv = g.scalar_value();
                    for (s, w) in terms {
                        if self.ng(s) {
                            acc(&mut grads, s, Tensor::scalar(gv * w));
                        }
                    }
                }
                Op::StraightThrough { h } => acc(&mut grads, h, g),
            }
        }
        out
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
