use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Segment layout for packed attention.
///
/// Query rows are partitioned into contiguous segments; segment `s` attends
/// only to its key range. Sequences are packed back to back with no padding,
/// so each sentence is one segment. Several query segments may share a key
/// range (beam hypotheses reading the same source).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSegments {
    q: Vec<Range<usize>>,
    k: Vec<Range<usize>>,
    k_rows: usize,
}

impl AttentionSegments {
    /// Segments from two offset lists of equal length (`[0, n1, n1+n2, ...]`).
    pub fn new(q_offsets: Vec<usize>, k_offsets: Vec<usize>) -> Result<Self> {
        let ranges = |o: &[usize]| o.windows(2).map(|w| w[0]..w[1]).collect::<Vec<_>>();
        if q_offsets.len() != k_offsets.len() || k_offsets.first() != Some(&0) {
            return Err(Error::InvalidTensor(format!(
                "bad attention segments q={q_offsets:?} k={k_offsets:?}"
            )));
        }
        let k_rows = *k_offsets.last().unwrap();
        Self::with_ranges(ranges(&q_offsets), ranges(&k_offsets), k_rows)
    }

    pub fn self_attention(offsets: &[usize]) -> Result<Self> {
        Self::new(offsets.to_vec(), offsets.to_vec())
    }

    /// Explicit ranges; query ranges must tile `0..n` in order, key ranges
    /// must be non-empty and lie inside `0..k_rows`.
    pub fn with_ranges(q: Vec<Range<usize>>, k: Vec<Range<usize>>, k_rows: usize) -> Result<Self> {
        let tiles = q.first().is_some_and(|r| r.start == 0)
            && q.windows(2).all(|w| w[0].end == w[1].start)
            && q.iter().all(|r| r.start < r.end);
        let keys_ok = k.iter().all(|r| r.start < r.end && r.end <= k_rows);
        if q.len() != k.len() || !tiles || !keys_ok {
            return Err(Error::InvalidTensor(format!(
                "bad attention segments q={q:?} k={k:?} (key rows {k_rows})"
            )));
        }
        Ok(AttentionSegments { q, k, k_rows })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn q_rows(&self) -> usize {
        self.q.last().map_or(0, |r| r.end)
    }

    pub fn k_rows(&self) -> usize {
        self.k_rows
    }

    fn q_range(&self, s: usize) -> Range<usize> {
        self.q[s].clone()
    }

    fn k_range(&self, s: usize) -> Range<usize> {
        self.k[s].clone()
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNT {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
        scale: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Arc<AttentionSegments>,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        smoothing: f64,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

fn slot<'a, T: Float>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so walking them backwards is a
/// valid reverse topological order. Gradients are only propagated into nodes
/// that transitively depend on a trainable leaf; frozen parameters cost no
/// backward work of their own.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_vars.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf; `requires_grad` makes its gradient available after backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a parameter as a leaf. Repeated use of the same parameter
    /// within one tape shares a single node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, used for the tied output projection.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Adds `bias[D]` to every row of `x[..×D]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.numel() != d {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::of_f64(factor);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            if *o < T::zero() {
                *o = T::zero();
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Normalizes over the last axis: `(x − mean)/sqrt(var + eps)·gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidTensor("layer_norm eps must be positive".into()));
        }
        let rows = vx.rows();
        let mut out = Tensor::zeros(vx.shape());
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::of_f64(rs);
            for j in 0..d {
                let xh = T::of_f64((row[j].as_f64() - mean) * rs);
                xhat[r * d + j] = xh;
                out.data_mut()[r * d + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout: kept units are scaled by `1/(1−p)`. Callers skip this
    /// op entirely in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Gathers rows of `table[V×D]`, each multiplied by `scale`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], scale: f64) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::dim("embedding", vt.shape(), &[ids.len()]));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::InvalidTensor("embedding of an empty sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::InvalidTensor(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let scale = T::of_f64(scale);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            let src = vt.row(id as usize);
            for (o, &s) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(src) {
                *o = s * scale;
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed segments.
    ///
    /// `q[Nq×D]`, `k[Nk×D]`, `v[Nk×D]`; head `h` owns columns
    /// `h·D/heads..(h+1)·D/heads`. With `causal`, query row `i` of a segment
    /// only sees key rows `≤ i` of the same segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &Arc<AttentionSegments>,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.last_dim();
        if vk.shape() != vv.shape()
            || vk.last_dim() != d
            || heads == 0
            || d % heads != 0
            || vq.rows() != segs.q_rows()
            || vk.rows() != segs.k_rows()
        {
            return Err(Error::dim("attention", vq.shape(), vk.shape()));
        }
        let dh = d / heads;
        let inv = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(vq.shape());
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in 0..segs.len() {
            let (qr, kr) = (segs.q_range(s), segs.k_range(s));
            if causal && qr.len() > kr.len() {
                return Err(Error::InvalidTensor(
                    "causal attention needs as many keys as queries".into(),
                ));
            }
            for h in 0..heads {
                let c0 = h * dh;
                for (ii, i) in qr.clone().enumerate() {
                    let qi = &vq.data()[i * d + c0..i * d + c0 + dh];
                    let visible = if causal { ii + 1 } else { kr.len() };
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for j in kr.start..kr.start + visible {
                        let kj = &vk.data()[j * d + c0..j * d + c0 + dh];
                        let sc = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * inv;
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    let mut denom = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    let row_out = &mut out.data_mut()[i * d + c0..i * d + c0 + dh];
                    for (jj, sc) in scores.iter().enumerate() {
                        let p = *sc / denom;
                        probs.push(p);
                        let vj = &vv.data()[(kr.start + jj) * d + c0..(kr.start + jj) * d + c0 + dh];
                        for (o, &x) in row_out.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    for _ in visible..kr.len() {
                        probs.push(T::zero());
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segs: Arc::clone(segs),
                heads,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Mean over positions of the label-smoothed negative log-likelihood:
    /// `(1−ε)·NLL(target) + ε·mean_v NLL(v)`.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[u32], smoothing: f64) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.shape()[0] != targets.len() {
            return Err(Error::dim("cross_entropy", vl.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidTensor(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let (t, v) = (vl.shape()[0], vl.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&y| y as usize >= v) {
            return Err(Error::InvalidTensor(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        let mut probs = vec![T::zero(); t * v];
        let mut total = 0.0f64;
        for r in 0..t {
            let row = vl.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let sum_exp: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let nll_target = lse - row[targets[r] as usize].as_f64();
            let mean_logit = row.iter().map(|x| x.as_f64()).sum::<f64>() / v as f64;
            let nll_uniform = lse - mean_logit;
            total += (1.0 - smoothing) * nll_target + smoothing * nll_uniform;
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = T::of_f64((x.as_f64() - lse).exp());
            }
        }
        let loss = Tensor::scalar(T::of_f64(total / t as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward called twice without resetting the tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(&[1]));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Runs [`Tape::backward`] and adds every trainable parameter's gradient
    /// into its `grad` slot in `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (&id, &var) in &self.param_vars {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.grads[var.0].as_ref() {
                match p.grad.as_mut() {
                    Some(acc) => acc.add_assign(g),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if needs(*a) {
                    // da += g · bᵀ
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize, T::one(), slot(grads, nodes, *a).data_mut(), k as isize, 1);
                }
                if needs(*b) {
                    // db += aᵀ · g
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1, T::one(), slot(grads, nodes, *b).data_mut(), n as isize, 1);
                }
            }
            Op::MatMulNT { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if needs(*a) {
                    // da += g · b
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), k as isize, 1, T::one(), slot(grads, nodes, *a).data_mut(), k as isize, 1);
                }
                if needs(*b) {
                    // db += gᵀ · a
                    T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, va.data(), k as isize, 1, T::one(), slot(grads, nodes, *b).data_mut(), k as isize, 1);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    slot(grads, nodes, *a).add_assign(g);
                }
                if needs(*b) {
                    slot(grads, nodes, *b).add_assign(g);
                }
            }
            Op::AddRow { x, bias } => {
                if needs(*x) {
                    slot(grads, nodes, *x).add_assign(g);
                }
                if needs(*bias) {
                    let d = g.last_dim();
                    let gb = slot(grads, nodes, *bias).data_mut();
                    for row in g.data().chunks(d) {
                        for (o, &r) in gb.iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if needs(*x) {
                    for (o, &r) in slot(grads, nodes, *x).data_mut().iter_mut().zip(g.data()) {
                        *o += r * *factor;
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let out = &nodes[i].value;
                    for ((o, &r), &y) in slot(grads, nodes, *x).data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if y > T::zero() {
                            *o += r;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let rows = g.rows();
                if needs(*gain) {
                    let gg = slot(grads, nodes, *gain).data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = slot(grads, nodes, *bias).data_mut();
                    for row in g.data().chunks(d) {
                        for (o, &r) in gb.iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                }
                if needs(*x) {
                    let gain_v = nodes[gain.0].value.data();
                    let gx = slot(grads, nodes, *x).data_mut();
                    for r in 0..rows {
                        let mut mean_dx = 0.0f64;
                        let mut mean_dx_xhat = 0.0f64;
                        for j in 0..d {
                            let dxh = (g.data()[r * d + j] * gain_v[j]).as_f64();
                            mean_dx += dxh;
                            mean_dx_xhat += dxh * xhat[r * d + j].as_f64();
                        }
                        mean_dx /= d as f64;
                        mean_dx_xhat /= d as f64;
                        let rs = rstd[r].as_f64();
                        for j in 0..d {
                            let dxh = (g.data()[r * d + j] * gain_v[j]).as_f64();
                            let val = rs * (dxh - mean_dx - xhat[r * d + j].as_f64() * mean_dx_xhat);
                            gx[r * d + j] += T::of_f64(val);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    for ((o, &r), &m) in slot(grads, nodes, *x).data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += r * m;
                    }
                }
            }
            Op::Embedding { table, ids, scale } => {
                if needs(*table) {
                    let d = g.last_dim();
                    let gt = slot(grads, nodes, *table).data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += x * *scale;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                causal,
                probs,
            } => {
                let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let d = vq.last_dim();
                let dh = d / heads;
                let inv = T::of_f64(1.0 / (dh as f64).sqrt());
                let mut dq = needs(*q).then(|| Tensor::<T>::zeros(vq.shape()));
                let mut dk = needs(*k).then(|| Tensor::<T>::zeros(vk.shape()));
                let mut dv = needs(*v).then(|| Tensor::<T>::zeros(vv.shape()));
                let mut cursor = 0;
                let mut dp = Vec::new();
                for s in 0..segs.len() {
                    let (qr, kr) = (segs.q_range(s), segs.k_range(s));
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for (ii, i) in qr.clone().enumerate() {
                            let p = &probs[cursor..cursor + kr.len()];
                            cursor += kr.len();
                            let visible = if *causal { ii + 1 } else { kr.len() };
                            let gi = &g.data()[i * d + c0..i * d + c0 + dh];
                            // dP_ij = g_i · v_j ; dS = P ⊙ (dP − Σ P·dP)
                            dp.clear();
                            let mut dot = T::zero();
                            for jj in 0..visible {
                                let j = kr.start + jj;
                                let vj = &vv.data()[j * d + c0..j * d + c0 + dh];
                                let x = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                                dot += p[jj] * x;
                                dp.push(x);
                            }
                            for jj in 0..visible {
                                let j = kr.start + jj;
                                if let Some(dv) = dv.as_mut() {
                                    let dst = &mut dv.data_mut()[j * d + c0..j * d + c0 + dh];
                                    for (o, &x) in dst.iter_mut().zip(gi) {
                                        *o += p[jj] * x;
                                    }
                                }
                                let ds = p[jj] * (dp[jj] - dot) * inv;
                                if ds == T::zero() {
                                    continue;
                                }
                                if let Some(dq) = dq.as_mut() {
                                    let kj = &vk.data()[j * d + c0..j * d + c0 + dh];
                                    let dst = &mut dq.data_mut()[i * d + c0..i * d + c0 + dh];
                                    for (o, &x) in dst.iter_mut().zip(kj) {
                                        *o += ds * x;
                                    }
                                }
                                if let Some(dk) = dk.as_mut() {
                                    let qi = &vq.data()[i * d + c0..i * d + c0 + dh];
                                    let dst = &mut dk.data_mut()[j * d + c0..j * d + c0 + dh];
                                    for (o, &x) in dst.iter_mut().zip(qi) {
                                        *o += ds * x;
                                    }
                                }
                            }
                        }
                    }
                }
                let (q, k, v) = (*q, *k, *v);
                if let Some(t) = dq {
                    slot(grads, nodes, q).add_assign(&t);
                }
                if let Some(t) = dk {
                    slot(grads, nodes, k).add_assign(&t);
                }
                if let Some(t) = dv {
                    slot(grads, nodes, v).add_assign(&t);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                if needs(*logits) {
                    let v = nodes[logits.0].value.last_dim();
                    let t = targets.len();
                    let scale = g.item().as_f64() / t as f64;
                    let uniform = smoothing / v as f64;
                    let gl = slot(grads, nodes, *logits).data_mut();
                    for r in 0..t {
                        for c in 0..v {
                            let mut q = uniform;
                            if c == targets[r] as usize {
                                q += 1.0 - smoothing;
                            }
                            gl[r * v + c] += T::of_f64((probs[r * v + c].as_f64() - q) * scale);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    let gv = g.item();
                    for o in slot(grads, nodes, *x).data_mut() {
                        *o += gv;
                    }
                }
            }
        }
    }
}
