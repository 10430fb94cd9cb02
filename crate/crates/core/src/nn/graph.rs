//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers.

use std::collections::HashMap;

use rand::Rng as _;

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::rng::{rng_from, Rng};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<F> {
    Input,
    Param,
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    AddBroadcast(usize, usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, rstd: Vec<F> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<F> },
    Transpose12(usize),
    Prepend { x: usize, token: usize },
    SliceAxis1 { x: usize, start: usize },
    Reshape(usize),
    Gather { table: usize, ids: Vec<usize> },
    WeightedSumAxis1 { x: usize, w: usize },
    Softmax(usize),
    NormalizeRows { x: usize, norms: Vec<F> },
    Dropout { x: usize, mask: Vec<F> },
    Dot { x: usize, w: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<usize, Var>,
    dropout_rng: Option<Rng>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = K * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * K * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

/// Smooth GELU (tanh form).
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), dropout_rng: None }
    }

    /// Training graph whose dropout masks come from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph { dropout_rng: Some(rng_from(seed)), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf that is not a stored parameter (used by tests).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Parameter `id` of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `x W + b` over the last axis of `x`; `W` is `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let din = xv.last_dim();
        assert_eq!(wv.shape.len(), 2, "weight must be 2-D");
        assert_eq!(wv.shape[0], din, "linear: input width {din} vs weight {:?}", wv.shape);
        let dout = wv.shape[1];
        let rows = xv.rows();
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&shape);
        F::gemm(rows, din, dout, F::one(), &xv.data, din as isize, 1, &wv.data, dout as isize, 1, F::zero(), &mut out.data, dout as isize, 1);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), dout);
            for row in out.data.chunks_exact_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let rg = self.rg(&deps);
        self.push(out, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add: shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let shape = av.shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        self.push(Tensor { shape, data }, Op::Add(a.0, b.0), rg)
    }

    /// `a + b` where `b` has the rank of `a` and every axis either matches
    /// or has size 1. The last axis must match.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast(&av.shape, &bv.shape);
        let mut out = av.clone();
        broadcast_walk(&av.shape, &bv.shape, |ao, bo, n| {
            for i in 0..n {
                out.data[ao + i] += bv.data[bo + i];
            }
        });
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::AddBroadcast(a.0, b.0), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| F::c(gelu_parts(v.f64()).0)).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(Tensor { shape, data }, Op::Gelu(x.0), rg)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert_eq!(g.len(), c);
        let rows = xv.rows();
        let mut out = Tensor::zeros(&xv.shape);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let inv_c = F::c(1.0 / c as f64);
        for r in 0..rows {
            let row = &xv.data[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_c;
            let rs = F::one() / (var + F::c(LN_EPS)).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (row[i] - mean) * rs;
                xhat[r * c + i] = h;
                out.data[r * c + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention over `G` independent groups.
    /// `q`, `k`, `v` are `G x L x C`; `key_lens[g]` (if given) hides keys at
    /// positions `>= key_lens[g]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_lens: Option<Vec<usize>>) -> Var {
        let shape = self.value(q).shape.clone();
        assert_eq!(shape.len(), 3, "attention expects G x L x C");
        assert_eq!(self.value(k).shape, shape);
        assert_eq!(self.value(v).shape, shape);
        let (g, l, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % heads, 0);
        if let Some(lens) = &key_lens {
            assert_eq!(lens.len(), g);
            assert!(lens.iter().all(|&n| n >= 1 && n <= l));
        }
        let dh = c / heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); g * heads * l * l];
        let mut out = Tensor::zeros(&shape);
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        for gi in 0..g {
            let valid = key_lens.as_ref().map_or(l, |lens| lens[gi]);
            for h in 0..heads {
                let off = gi * l * c + h * dh;
                let p = &mut probs[(gi * heads + h) * l * l..(gi * heads + h + 1) * l * l];
                // S = scale * Q K^T
                F::gemm(l, dh, l, scale, &qd[off..], c as isize, 1, &kd[off..], 1, c as isize, F::zero(), p, l as isize, 1);
                for row in p.chunks_exact_mut(l) {
                    let m = row[..valid].iter().copied().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if j < valid { (*s - m).exp() } else { F::zero() };
                        sum += *s;
                    }
                    let inv = F::one() / sum;
                    for s in row.iter_mut() {
                        *s *= inv;
                    }
                }
                F::gemm(l, l, dh, F::one(), p, l as isize, 1, &vd[off..], c as isize, 1, F::zero(), &mut out.data[off..], c as isize, 1);
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs }, rg)
    }

    /// `A x B x C x D -> A x C x B x D`.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape.clone();
        assert_eq!(s.len(), 4);
        let mut out = Tensor::zeros(&[s[0], s[2], s[1], s[3]]);
        transpose12_into(&xv.data, &mut out.data, s[0], s[1], s[2], s[3], false);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Transpose12(x.0), rg)
    }

    /// Prepends `token` (shaped like one slice of axis 1) to every batch item.
    pub fn prepend(&mut self, x: Var, token: Var) -> Var {
        let (xv, tv) = (self.value(x), self.value(token));
        let s = &xv.shape;
        assert!(s.len() >= 2);
        let inner: usize = s[2..].iter().product();
        assert_eq!(tv.len(), inner, "token must match one step of axis 1");
        let (a, t) = (s[0], s[1]);
        let mut shape = s.clone();
        shape[1] = t + 1;
        let mut data = Vec::with_capacity(a * (t + 1) * inner);
        for ai in 0..a {
            data.extend_from_slice(&tv.data);
            data.extend_from_slice(&xv.data[ai * t * inner..(ai + 1) * t * inner]);
        }
        let rg = self.rg(&[x.0, token.0]);
        self.push(Tensor { shape, data }, Op::Prepend { x: x.0, token: token.0 }, rg)
    }

    /// Positions `start..start + len` of axis 1.
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let s = &xv.shape;
        assert!(s.len() >= 2 && start + len <= s[1]);
        let inner: usize = s[2..].iter().product();
        let mut shape = s.clone();
        shape[1] = len;
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for ai in 0..s[0] {
            let base = (ai * s[1] + start) * inner;
            data.extend_from_slice(&xv.data[base..base + len * inner]);
        }
        let rg = self.rg(&[x.0]);
        self.push(Tensor { shape, data }, Op::SliceAxis1 { x: x.0, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape {:?} -> {shape:?}", xv.shape);
        let t = Tensor { shape: shape.to_vec(), data: xv.data.clone() };
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Reshape(x.0), rg)
    }

    /// Rows `ids` of the 2-D `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.shape.len(), 2);
        let c = tv.shape[1];
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < tv.shape[0], "gather index {i} out of range {}", tv.shape[0]);
            data.extend_from_slice(&tv.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table.0]);
        self.push(Tensor { shape: vec![ids.len(), c], data }, Op::Gather { table: table.0, ids: ids.to_vec() }, rg)
    }

    /// `x: B x J x C`, `w: J` -> `B x C` with `out[b] = sum_j w[j] x[b, j]`.
    pub fn weighted_sum_axis1(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.shape.len(), 3);
        let (b, j, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert_eq!(wv.len(), j);
        let mut out = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ji in 0..j {
                let wj = wv.data[ji];
                let src = &xv.data[(bi * j + ji) * c..(bi * j + ji + 1) * c];
                for (o, s) in out.data[bi * c..(bi + 1) * c].iter_mut().zip(src) {
                    *o += wj * *s;
                }
            }
        }
        let rg = self.rg(&[x.0, w.0]);
        self.push(out, Op::WeightedSumAxis1 { x: x.0, w: w.0 }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Softmax(x.0), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data.chunks_exact_mut(c) {
            let n = row.iter().map(|v| *v * *v).sum::<F>().sqrt().max(F::c(NORM_EPS));
            norms.push(n);
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        let rg = self.rg(&[x.0]);
        self.push(out, Op::NormalizeRows { x: x.0, norms }, rg)
    }

    /// Inverted dropout; identity on inference graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = F::c(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<F> = (0..n).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data.iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(Tensor { shape, data }, Op::Dropout { x: x.0, mask }, rg)
    }

    /// Scalar `sum(x * w)` for a constant `w`.
    pub fn dot(&mut self, x: Var, w: &Tensor<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len());
        let s = xv.data.iter().zip(&w.data).map(|(a, b)| *a * *b).sum::<F>();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::new(&[1], vec![s]), Op::Dot { x: x.0, w: w.data.clone() }, rg)
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor<F>)>) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape, self.nodes[v.0].value.shape, "seed gradient shape");
            accumulate(&mut self.grads, v.0, &g.shape, |d| add_into(d, &g.data));
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backward_node(i, &gout);
            self.grads[i] = Some(gout);
        }
    }

    fn backward_node(&mut self, i: usize, gout: &Tensor<F>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |j: usize| nodes[j].requires_grad;
        let shape_of = |j: usize| nodes[j].value.shape.clone();
        let go = &gout.data;
        match &nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                let (din, dout) = (wv.shape[0], wv.shape[1]);
                let rows = xv.rows();
                if needs(*x) {
                    accumulate(grads, *x, &xv.shape, |dx| {
                        F::gemm(rows, dout, din, F::one(), go, dout as isize, 1, &wv.data, 1, dout as isize, F::one(), dx, din as isize, 1)
                    });
                }
                if needs(*w) {
                    accumulate(grads, *w, &wv.shape, |dw| {
                        F::gemm(din, rows, dout, F::one(), &xv.data, 1, din as isize, go, dout as isize, 1, F::one(), dw, dout as isize, 1)
                    });
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    accumulate(grads, b, &[dout], |db| {
                        for row in go.chunks_exact(dout) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if needs(p) {
                        accumulate(grads, p, &gout.shape, |d| add_into(d, go));
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, &gout.shape, |d| add_into(d, go));
                }
                if needs(*b) {
                    let bs = shape_of(*b);
                    accumulate(grads, *b, &bs, |d| {
                        broadcast_walk(&gout.shape, &bs, |ao, bo, n| {
                            for k in 0..n {
                                d[bo + k] += go[ao + k];
                            }
                        })
                    });
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = &nodes[*x].value;
                    accumulate(grads, *x, &xv.shape, |d| {
                        for ((dd, xx), g) in d.iter_mut().zip(&xv.data).zip(go) {
                            *dd += *g * F::c(gelu_parts(xx.f64()).1);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = gout.last_dim();
                let g = &nodes[*gamma].value.data;
                if needs(*gamma) {
                    accumulate(grads, *gamma, &[c], |d| {
                        for (row, h) in go.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for k in 0..c {
                                d[k] += row[k] * h[k];
                            }
                        }
                    });
                }
                if needs(*beta) {
                    accumulate(grads, *beta, &[c], |d| {
                        for row in go.chunks_exact(c) {
                            add_into(d, row);
                        }
                    });
                }
                if needs(*x) {
                    let inv_c = F::c(1.0 / c as f64);
                    accumulate(grads, *x, &gout.shape, |d| {
                        for (r, ((drow, row), h)) in d.chunks_exact_mut(c).zip(go.chunks_exact(c)).zip(xhat.chunks_exact(c)).enumerate() {
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for k in 0..c {
                                let dh = row[k] * g[k];
                                m1 += dh;
                                m2 += dh * h[k];
                            }
                            m1 = m1 * inv_c;
                            m2 = m2 * inv_c;
                            for k in 0..c {
                                let dh = row[k] * g[k];
                                drow[k] += rstd[r] * (dh - m1 - h[k] * m2);
                            }
                        }
                    });
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (g, l, c) = (gout.shape[0], gout.shape[1], gout.shape[2]);
                let heads = *heads;
                let dh = c / heads;
                let scale = F::c(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (&nodes[*q].value.data, &nodes[*k].value.data, &nodes[*v].value.data);
                let mut dq = vec![F::zero(); g * l * c];
                let mut dk = vec![F::zero(); g * l * c];
                let mut dv = vec![F::zero(); g * l * c];
                let mut ds = vec![F::zero(); l * l];
                for gi in 0..g {
                    for h in 0..heads {
                        let off = gi * l * c + h * dh;
                        let p = &probs[(gi * heads + h) * l * l..(gi * heads + h + 1) * l * l];
                        // dV += P^T dO
                        F::gemm(l, l, dh, F::one(), p, 1, l as isize, &go[off..], c as isize, 1, F::one(), &mut dv[off..], c as isize, 1);
                        // dP = dO V^T
                        F::gemm(l, dh, l, F::one(), &go[off..], c as isize, 1, &vd[off..], 1, c as isize, F::zero(), &mut ds, l as isize, 1);
                        for (srow, prow) in ds.chunks_exact_mut(l).zip(p.chunks_exact(l)) {
                            let dot = srow.iter().zip(prow).map(|(a, b)| *a * *b).sum::<F>();
                            for (s, pp) in srow.iter_mut().zip(prow) {
                                *s = *pp * (*s - dot);
                            }
                        }
                        // dQ += scale dS K, dK += scale dS^T Q
                        F::gemm(l, l, dh, scale, &ds, l as isize, 1, &kd[off..], c as isize, 1, F::one(), &mut dq[off..], c as isize, 1);
                        F::gemm(l, l, dh, scale, &ds, 1, l as isize, &qd[off..], c as isize, 1, F::one(), &mut dk[off..], c as isize, 1);
                    }
                }
                for (p, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(p) {
                        accumulate(grads, p, &gout.shape, |acc| add_into(acc, &d));
                    }
                }
            }
            Op::Transpose12(x) => {
                if needs(*x) {
                    let s = shape_of(*x);
                    accumulate(grads, *x, &s, |d| transpose12_into(go, d, s[0], s[2], s[1], s[3], true));
                }
            }
            Op::Prepend { x, token } => {
                let s = &gout.shape;
                let inner: usize = s[2..].iter().product();
                let (a, t1) = (s[0], s[1]);
                if needs(*token) {
                    accumulate(grads, *token, &shape_of(*token), |d| {
                        for ai in 0..a {
                            add_into(d, &go[ai * t1 * inner..ai * t1 * inner + inner]);
                        }
                    });
                }
                if needs(*x) {
                    accumulate(grads, *x, &shape_of(*x), |d| {
                        for ai in 0..a {
                            let src = &go[(ai * t1 + 1) * inner..(ai + 1) * t1 * inner];
                            add_into(&mut d[ai * (t1 - 1) * inner..(ai + 1) * (t1 - 1) * inner], src);
                        }
                    });
                }
            }
            Op::SliceAxis1 { x, start } => {
                if needs(*x) {
                    let s = shape_of(*x);
                    let inner: usize = s[2..].iter().product();
                    let len = gout.shape[1];
                    accumulate(grads, *x, &s, |d| {
                        for ai in 0..s[0] {
                            let base = (ai * s[1] + start) * inner;
                            add_into(&mut d[base..base + len * inner], &go[ai * len * inner..(ai + 1) * len * inner]);
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(grads, *x, &shape_of(*x), |d| add_into(d, go));
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let s = shape_of(*table);
                    let c = s[1];
                    accumulate(grads, *table, &s, |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut d[id * c..(id + 1) * c], &go[r * c..(r + 1) * c]);
                        }
                    });
                }
            }
            Op::WeightedSumAxis1 { x, w } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (b, j, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                if needs(*x) {
                    accumulate(grads, *x, &xv.shape, |d| {
                        for bi in 0..b {
                            for ji in 0..j {
                                let wj = wv.data[ji];
                                for k in 0..c {
                                    d[(bi * j + ji) * c + k] += wj * go[bi * c + k];
                                }
                            }
                        }
                    });
                }
                if needs(*w) {
                    accumulate(grads, *w, &wv.shape, |d| {
                        for bi in 0..b {
                            for ji in 0..j {
                                let src = &xv.data[(bi * j + ji) * c..(bi * j + ji + 1) * c];
                                d[ji] += src.iter().zip(&go[bi * c..(bi + 1) * c]).map(|(a, g)| *a * *g).sum::<F>();
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let y = &nodes[i].value;
                    let c = y.last_dim();
                    accumulate(grads, *x, &y.shape, |d| {
                        for ((drow, yrow), grow) in d.chunks_exact_mut(c).zip(y.data.chunks_exact(c)).zip(go.chunks_exact(c)) {
                            let dot = yrow.iter().zip(grow).map(|(a, b)| *a * *b).sum::<F>();
                            for k in 0..c {
                                drow[k] += yrow[k] * (grow[k] - dot);
                            }
                        }
                    });
                }
            }
            Op::NormalizeRows { x, norms } => {
                if needs(*x) {
                    let y = &nodes[i].value;
                    let c = y.last_dim();
                    accumulate(grads, *x, &y.shape, |d| {
                        for (r, ((drow, yrow), grow)) in d.chunks_exact_mut(c).zip(y.data.chunks_exact(c)).zip(go.chunks_exact(c)).enumerate() {
                            let dot = yrow.iter().zip(grow).map(|(a, b)| *a * *b).sum::<F>();
                            for k in 0..c {
                                drow[k] += (grow[k] - yrow[k] * dot) / norms[r];
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    accumulate(grads, *x, &gout.shape, |d| {
                        for ((dd, g), m) in d.iter_mut().zip(go).zip(mask) {
                            *dd += *g * *m;
                        }
                    });
                }
            }
            Op::Dot { x, w } => {
                if needs(*x) {
                    let g0 = go[0];
                    accumulate(grads, *x, &shape_of(*x), |d| {
                        for (dd, ww) in d.iter_mut().zip(w) {
                            *dd += g0 * *ww;
                        }
                    });
                }
            }
        }
    }

    /// Adds the gradient of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for (&id, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], idx: usize, shape: &[usize], f: impl FnOnce(&mut [F])) {
    let g = grads[idx].get_or_insert_with(|| Tensor::zeros(shape));
    f(&mut g.data);
}

fn check_broadcast(a: &[usize], b: &[usize]) {
    assert_eq!(a.len(), b.len(), "broadcast rank mismatch {a:?} vs {b:?}");
    assert_eq!(a.last(), b.last(), "broadcast needs matching last axis {a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!(x == y || *y == 1, "cannot broadcast {b:?} to {a:?}");
    }
}

/// Calls `f(a_offset, b_offset, run)` for every contiguous run along the
/// last axis of `a`, with `b`'s matching offset.
fn broadcast_walk(a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = a.len();
    let run = a[rank - 1];
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for k in (0..rank).rev() {
        b_strides[k] = if b[k] == 1 { 0 } else { s };
        s *= b[k];
    }
    let outer: usize = a[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut b_off = 0;
    for o in 0..outer {
        f(o * run, b_off, run);
        for k in (0..rank - 1).rev() {
            idx[k] += 1;
            b_off += b_strides[k];
            if idx[k] < a[k] {
                break;
            }
            b_off -= b_strides[k] * idx[k];
            idx[k] = 0;
        }
    }
}

/// Copies (or adds, when `accumulate`) `src: A x B x C x D` into
/// `dst: A x C x B x D`.
fn transpose12_into<F: Scalar>(src: &[F], dst: &mut [F], a: usize, b: usize, c: usize, d: usize, accumulate: bool) {
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let s = ((ai * b + bi) * c + ci) * d;
                let t = ((ai * c + ci) * b + bi) * d;
                if accumulate {
                    add_into(&mut dst[t..t + d], &src[s..s + d]);
                } else {
                    dst[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
    }
}
