//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in creation order,
//! which is already a topological order. [`Tape::backward`] walks the record
//! in reverse and accumulates exact gradients into every node that depends on
//! a leaf. Values routed through [`Tape::stop_gradient`] are treated as
//! constants: nothing upstream of the marker receives gradient through it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::sparse::SparseMatrix;
use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    SpMM {
        a: Arc<SparseMatrix>,
        b: usize,
        transpose: bool,
    },
    LeakyRelu(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sum(usize),
    SumSquares(usize),
    RowSum(usize),
    RowDot(usize, usize),
    GatherRows {
        src: usize,
        index: Arc<Vec<Option<usize>>>,
    },
    Interleave(Vec<usize>),
    SegmentSum {
        src: usize,
        group: usize,
        mask: Option<Arc<Vec<bool>>>,
    },
    MaskRows {
        src: usize,
        mask: Arc<Vec<bool>>,
    },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Attention(Box<AttentionRecord>),
    StopGradient,
}

struct AttentionRecord {
    q: usize,
    k: usize,
    v: usize,
    group: usize,
    heads: usize,
    mask: Option<Arc<Vec<bool>>>,
    /// Softmax weights laid out as `[group][head][query][key]`.
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of a forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    /// Values substituted for stop-gradient outputs, in call order.
    frozen: Option<std::collections::VecDeque<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when no gradient
    /// reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.idx]),
        }
    }

    /// Whether any gradient flowed into `v`.
    pub fn reached(&self, v: Var) -> bool {
        v.tape == self.tape && self.grads.get(v.idx).is_some_and(Option::is_some)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            frozen: None,
        }
    }

    /// A tape whose successive stop-gradient calls output `values` instead
    /// of their inputs, so a perturbed evaluation can hold blocked
    /// quantities at a reference point.
    pub fn with_frozen(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values.into()),
            ..Self::new()
        }
    }

    /// Outputs of every stop-gradient call so far, in call order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.check(v)?])
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].needs_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.add(&self.node(b)?.value)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a.idx, b.idx), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.sub(&self.node(b)?.value)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a.idx, b.idx), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.mul(&self.node(b)?.value)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a.idx, b.idx), g))
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let mv = &self.node(m)?.value;
        let bv = &self.node(bias)?.value;
        if !mv.is_matrix() || bv.shape() != [mv.cols()] {
            return Err(Error::shape(format!(
                "add_bias {:?} + {:?}",
                mv.shape(),
                bv.shape()
            )));
        }
        let mut value = mv.clone();
        let c = mv.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let g = self.any_grad(&[m, bias]);
        Ok(self.push(value, Op::AddBias(m.idx, bias.idx), g))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.node(a)?.value.scale(k);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a.idx, k), g))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x + c);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::AddScalar(a.idx), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a.idx, b.idx), g))
    }

    /// `a · b` (or `aᵀ · b` when `transpose`) for a constant sparse `a`.
    pub fn spmm(&mut self, a: &Arc<SparseMatrix>, b: Var, transpose: bool) -> Result<Var> {
        let bv = &self.node(b)?.value;
        let (out_rows, inner) = if transpose {
            (a.cols(), a.rows())
        } else {
            (a.rows(), a.cols())
        };
        if !bv.is_matrix() || bv.rows() != inner {
            return Err(Error::shape(format!(
                "spmm {}x{} (transpose={transpose}) by {:?}",
                a.rows(),
                a.cols(),
                bv.shape()
            )));
        }
        let n = bv.cols();
        let mut out = vec![0.0; out_rows * n];
        if transpose {
            a.spmm_t_into(bv.data(), n, &mut out);
        } else {
            a.spmm_into(bv.data(), n, &mut out);
        }
        let value = Tensor::matrix(out_rows, n, out)?;
        let g = self.any_grad(&[b]);
        Ok(self.push(
            value,
            Op::SpMM {
                a: Arc::clone(a),
                b: b.idx,
                transpose,
            },
            g,
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self
            .node(a)?
            .value
            .map(|x| if x >= 0.0 { x } else { slope * x });
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::LeakyRelu(a.idx, slope), g))
    }

    /// `max(0, x)`; the subgradient at the kink is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Relu(a.idx), g))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(super::ops::logistic);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sigmoid(a.idx), g))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(f64::tanh);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Tanh(a.idx), g))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.node(a)?.value.sum());
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sum(a.idx), g))
    }

    /// Squared Frobenius norm, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.node(a)?.value.sum_squares());
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::SumSquares(a.idx), g))
    }

    /// Per-row sums of a matrix, as a vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if !av.is_matrix() {
            return Err(Error::shape("row_sum needs a matrix"));
        }
        let value = Tensor::vector((0..av.rows()).map(|i| av.row(i).iter().sum()).collect());
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::RowSum(a.idx), g))
    }

    /// Per-row dot products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        if !av.is_matrix() || av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "row_dot {:?} . {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = Tensor::vector(
            (0..av.rows())
                .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(x, y)| x * y).sum())
                .collect(),
        );
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::RowDot(a.idx, b.idx), g))
    }

    /// Selects rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let sv = &self.node(src)?.value;
        if !sv.is_matrix() {
            return Err(Error::shape("gather_rows needs a matrix"));
        }
        let c = sv.cols();
        let mut out = vec![0.0; index.len() * c];
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= sv.rows() {
                    return Err(Error::shape(format!("row {r} out of {}", sv.rows())));
                }
                out[i * c..(i + 1) * c].copy_from_slice(sv.row(r));
            }
        }
        let value = Tensor::matrix(index.len(), c, out)?;
        let g = self.any_grad(&[src]);
        Ok(self.push(
            value,
            Op::GatherRows {
                src: src.idx,
                index: Arc::new(index),
            },
            g,
        ))
    }

    /// Interleaves `K` matrices of shape `N × d` into one `(N·K) × d` matrix
    /// whose row `n·K + k` is row `n` of the `k`-th input.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.node(*parts.first().ok_or_else(|| Error::shape("interleave of nothing"))?)?;
        let (n, d) = (first.value.rows(), first.value.cols());
        let k = parts.len();
        let mut out = vec![0.0; n * k * d];
        for (pk, &p) in parts.iter().enumerate() {
            let pv = &self.node(p)?.value;
            if pv.shape() != [n, d] {
                return Err(Error::shape(format!("interleave part {:?} vs [{n}, {d}]", pv.shape())));
            }
            for row in 0..n {
                let dst = (row * k + pk) * d;
                out[dst..dst + d].copy_from_slice(pv.row(row));
            }
        }
        let value = Tensor::matrix(n * k, d, out)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::Interleave(parts.iter().map(|p| p.idx).collect()), g))
    }

    /// Sums consecutive groups of `group` rows, skipping rows whose mask
    /// entry is false.
    pub fn segment_sum(&mut self, src: Var, group: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let sv = &self.node(src)?.value;
        if !sv.is_matrix() || group == 0 || sv.rows() % group != 0 {
            return Err(Error::shape(format!(
                "segment_sum of {:?} in groups of {group}",
                sv.shape()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != sv.rows() {
                return Err(Error::shape("segment_sum mask length"));
            }
        }
        let (rows, c) = (sv.rows(), sv.cols());
        let groups = rows / group;
        let mut out = vec![0.0; groups * c];
        for r in 0..rows {
            if mask.as_ref().is_some_and(|m| !m[r]) {
                continue;
            }
            let g = r / group;
            for (o, x) in out[g * c..(g + 1) * c].iter_mut().zip(sv.row(r)) {
                *o += x;
            }
        }
        let value = Tensor::matrix(groups, c, out)?;
        let g = self.any_grad(&[src]);
        Ok(self.push(
            value,
            Op::SegmentSum {
                src: src.idx,
                group,
                mask: mask.map(Arc::new),
            },
            g,
        ))
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, src: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let sv = &self.node(src)?.value;
        if !sv.is_matrix() || mask.len() != sv.rows() {
            return Err(Error::shape("mask_rows mask length"));
        }
        let mut value = sv.clone();
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                value.row_mut(r).fill(0.0);
            }
        }
        let g = self.any_grad(&[src]);
        Ok(self.push(value, Op::MaskRows { src: src.idx, mask }, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = &self.node(p)?.value;
            if !pv.is_matrix() || pv.rows() != rows {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.idx].value;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let value = Tensor::matrix(rows, total, out)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), g))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.node(a)?.value.reshape(shape)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a.idx), g))
    }

    /// Identity in the forward pass; blocks all gradient in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let replay = self.frozen.as_mut().and_then(|f| f.pop_front());
        let input = &self.node(a)?.value;
        let value = match replay {
            Some(v) if v.shape() == input.shape() => v,
            Some(v) => return Err(Error::shape(format!("frozen value {:?} for {:?}", v.shape(), input.shape()))),
            None => input.clone(),
        };
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Multi-head scaled dot-product attention over consecutive groups of
    /// `group` rows.
    ///
    /// `q`, `k`, `v` are `(G·group) × d` matrices of already projected rows.
    /// Within each group and head, query row `i` attends over the unmasked key
    /// rows with weights `softmax(q_i · k_j / sqrt(d / heads))`. Masked query
    /// rows produce zero output rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let qv = &self.node(q)?.value;
        let kv = &self.node(k)?.value;
        let vv = &self.node(v)?.value;
        if !qv.is_matrix() || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention q/k/v shapes differ"));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "embedding size {d} not divisible by {heads} heads"
            )));
        }
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(format!("{rows} rows in groups of {group}")));
        }
        if mask.as_ref().is_some_and(|m| m.len() != rows) {
            return Err(Error::shape("attention mask length"));
        }
        let valid = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / group;
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![0.0; rows * d];
        let mut logits = vec![0.0; group];
        for g in 0..groups {
            let base = g * group;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..group {
                    if !valid(base + i) {
                        continue;
                    }
                    let qi = &qv.row(base + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, logit) in logits.iter_mut().enumerate() {
                        if valid(base + j) {
                            let kj = &kv.row(base + j)[cols.clone()];
                            *logit = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                            max = max.max(*logit);
                        }
                    }
                    let p = &mut probs[((g * heads + h) * group + i) * group..][..group];
                    let mut z = 0.0;
                    for (j, (pj, &logit)) in p.iter_mut().zip(&logits).enumerate() {
                        if valid(base + j) {
                            *pj = (logit - max).exp();
                            z += *pj;
                        }
                    }
                    let orow = &mut out[(base + i) * d..(base + i + 1) * d];
                    for (j, pj) in p.iter_mut().enumerate() {
                        if valid(base + j) {
                            *pj /= z;
                            let vj = &vv.row(base + j)[cols.clone()];
                            for (o, x) in orow[cols.clone()].iter_mut().zip(vj) {
                                *o += *pj * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttentionRecord {
                q: q.idx,
                k: k.idx,
                v: v.idx,
                group,
                heads,
                mask,
                probs,
            })),
            g,
        ))
    }

    /// Softmax weights recorded by an attention node, laid out as
    /// `[group][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.idx)?.op {
            Op::Attention(rec) if v.tape == self.id => Some(&rec.probs),
            _ => None,
        }
    }

    /// Fingerprint of which side of their kink every ReLU / LeakyReLU input
    /// lies on. Two forward passes with equal fingerprints evaluate the same
    /// smooth branch.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: bool| {
            h ^= u64::from(bit);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(a, _) => self.nodes[a].value.data().iter().for_each(|&x| mix(x >= 0.0)),
                Op::Relu(a) => self.nodes[a].value.data().iter().for_each(|&x| mix(x > 0.0)),
                _ => {}
            }
        }
        h
    }

    /// Smallest distance of any hinge (ReLU) input to its kink.
    pub fn hinge_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        shapes.truncate(root + 1);
        grads.resize_with(self.nodes.len(), || None);
        shapes.extend(self.nodes[root + 1..].iter().map(|n| n.value.shape().to_vec()));
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], j: usize, delta: Tensor) -> Result<()> {
        if !self.nodes[j].needs_grad {
            return Ok(());
        }
        match &mut grads[j] {
            Some(existing) => existing.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn wants(&self, j: usize) -> bool {
        self.nodes[j].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(val(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::AddBias(m, bias) => {
                self.accumulate(grads, *m, g.clone())?;
                if self.wants(*bias) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb))?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = g.row(i);
                        for p in 0..k {
                            ga[i * k + p] = gi.iter().zip(bv.row(p)).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga)?)?;
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose()?;
                    let mut gb = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb)?)?;
                }
            }
            Op::SpMM { a, b, transpose } => {
                let bv = val(*b);
                let n = bv.cols();
                let mut gb = vec![0.0; bv.numel()];
                if *transpose {
                    a.spmm_into(g.data(), n, &mut gb);
                } else {
                    a.spmm_t_into(g.data(), n, &mut gb);
                }
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = g.zip_map(val(*a), |gx, x| if x >= 0.0 { gx } else { s * gx })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let ga = g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gx, y| gx * y * (1.0 - y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gx, y| gx * (1.0 - y * y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()))?;
            }
            Op::SumSquares(a) => {
                let k = 2.0 * g.item();
                self.accumulate(grads, *a, val(*a).scale(k))?;
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (row, &gi) in ga.data_mut().chunks_mut(c).zip(g.data()) {
                    row.fill(gi);
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.cols();
                let scaled = |other: &Tensor| {
                    let mut out = other.clone();
                    for (row, &gi) in out.data_mut().chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|x| *x *= gi);
                    }
                    out
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, scaled(bv))?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, scaled(av))?;
                }
            }
            Op::GatherRows { src, index } => {
                let sv = val(*src);
                let c = sv.cols();
                let mut gs = Tensor::zeros(sv.shape());
                for (i, ix) in index.iter().enumerate() {
                    if let Some(r) = *ix {
                        for (o, x) in gs.row_mut(r).iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *o += x;
                        }
                    }
                }
                self.accumulate(grads, *src, gs)?;
            }
            Op::Interleave(parts) => {
                let k = parts.len();
                let d = g.cols();
                let n = g.rows() / k;
                for (pk, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let mut gp = vec![0.0; n * d];
                    for row in 0..n {
                        gp[row * d..(row + 1) * d].copy_from_slice(g.row(row * k + pk));
                    }
                    self.accumulate(grads, p, Tensor::matrix(n, d, gp)?)?;
                }
            }
            Op::SegmentSum { src, group, mask } => {
                let sv = val(*src);
                let mut gs = Tensor::zeros(sv.shape());
                for r in 0..sv.rows() {
                    if mask.as_ref().is_some_and(|m| !m[r]) {
                        continue;
                    }
                    gs.row_mut(r).copy_from_slice(g.row(r / group));
                }
                self.accumulate(grads, *src, gs)?;
            }
            Op::MaskRows { src, mask } => {
                let mut gs = g.clone();
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        gs.row_mut(r).fill(0.0);
                    }
                }
                self.accumulate(grads, *src, gs)?;
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.wants(p) {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, w, gp)?)?;
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(val(*a).shape().to_vec())?)?;
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads)?,
        }
        Ok(())
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let qv = &self.nodes[rec.q].value;
        let kv = &self.nodes[rec.k].value;
        let vv = &self.nodes[rec.v].value;
        let (rows, d) = (qv.rows(), qv.cols());
        let (group, heads) = (rec.group, rec.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let valid = |r: usize| rec.mask.as_ref().is_none_or(|m| m[r]);
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; group];
        for grp in 0..rows / group {
            let base = grp * group;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..group {
                    if !valid(base + i) {
                        continue;
                    }
                    let p = &rec.probs[((grp * heads + h) * group + i) * group..][..group];
                    let go = &g.row(base + i)[c0..c0 + dh];
                    let mut weighted = 0.0;
                    for j in 0..group {
                        if !valid(base + j) {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vv.row(base + j)[c0..c0 + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        weighted += p[j] * dp[j];
                        let gvj = &mut gv[(base + j) * d + c0..(base + j) * d + c0 + dh];
                        for (o, x) in gvj.iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    let qi = &qv.row(base + i)[c0..c0 + dh];
                    for j in 0..group {
                        if !valid(base + j) {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(base + j)[c0..c0 + dh];
                        let gqi = &mut gq[(base + i) * d + c0..(base + i) * d + c0 + dh];
                        for (o, x) in gqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let gkj = &mut gk[(base + j) * d + c0..(base + j) * d + c0 + dh];
                        for (o, x) in gkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (idx, data) in [(rec.q, gq), (rec.k, gk), (rec.v, gv)] {
            self.accumulate(grads, idx, Tensor::matrix(rows, d, data)?)?;
        }
        Ok(())
    }
}
