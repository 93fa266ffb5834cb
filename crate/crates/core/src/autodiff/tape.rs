use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{gemm, split_axis, MatRef, Real, Tensor};

use super::OpKind;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    MaxAxis {
        input: Var,
        /// Flat input offset selected for each output element.
        source: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    EdgeFeatures {
        input: Var,
        neighbors: Arc<[usize]>,
        k: usize,
    },
    AddExpandLast {
        a: Var,
        b: Var,
    },
    WeightedNeighborSum {
        weights: Var,
        values: Var,
    },
    BatchMatmul {
        a: Var,
        b: Var,
    },
    Expand {
        input: Var,
        copies: usize,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Affine { .. } => OpKind::Affine,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::EdgeFeatures { .. } => OpKind::EdgeFeatures,
            Op::AddExpandLast { .. } => OpKind::AddExpandLast,
            Op::WeightedNeighborSum { .. } => OpKind::WeightedNeighborSum,
            Op::BatchMatmul { .. } => OpKind::BatchMatmul,
            Op::Expand { .. } => OpKind::Expand,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Sum { .. } => OpKind::Sum,
            Op::Scale { .. } => OpKind::Scale,
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// the running buffers once the step owns the parameters exclusively.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply(&self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::lit(momentum);
        let one_m = T::one() - m;
        for (r, &b) in store.buffer_mut(self.mean_buffer).data_mut().iter_mut().zip(&self.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store.buffer_mut(self.var_buffer).data_mut().iter_mut().zip(&self.var) {
            *r = m * *r + one_m * b;
        }
    }
}

/// Ordered record of executed operations. Rebuilt for every forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    bn_stats: Vec<BnStats<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
    /// Node indices in the order the backward sweep visited them.
    pub visit_order: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    /// Adds these gradients into the `grad` fields of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, g) in &self.grads {
            let p = store.get_mut(id);
            for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_stats: Vec::new(),
            fault: None,
        }
    }

    /// Deliberately scales the gradient rule of `kind` by a wrong factor.
    /// Only used to prove the verification harness detects broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Records a parameter leaf; gradients flow back to `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn record_bn_stats(&mut self, stats: BnStats<T>) {
        self.bn_stats.push(stats);
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStats<T>> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();
        let mut visit_order = Vec::with_capacity(root.0 + 1);

        for i in (0..=root.0).rev() {
            visit_order.push(i);
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                let wrong = T::lit(1.25);
                g.iter_mut().for_each(|v| *v *= wrong);
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(Gradients {
            grads: out,
            visit_order,
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut BTreeMap<ParamId, Tensor<T>>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = node.value.shape().to_vec();
                match out.get_mut(id) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(*id, Tensor::from_parts(shape, g.to_vec()));
                    }
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let w = val(*weight);
                let (cin, cout) = (w.shape()[0], w.shape()[1]);
                let x = val(*input);
                let rows = x.len() / cin;
                let gm = MatRef::row_major(g, rows, cout);
                if let Some(dx) = self.grad_slot(grads, *input) {
                    gemm(gm, MatRef::row_major(w.data(), cin, cout).t(), dx, true);
                }
                if let Some(dw) = self.grad_slot(grads, *weight) {
                    gemm(MatRef::row_major(x.data(), rows, cin).t(), gm, dw, true);
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for row in g.chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input).data();
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                        *d += if xi > T::zero() { gi } else { gi * *slope };
                    }
                }
            }
            Op::Relu { input } => {
                let x = val(*input).data();
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * extent * inner + j * inner + i;
                            let dot: T = (0..extent).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..extent {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { input, source } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (&s, &gi) in source.iter().zip(g) {
                        dx[s] += gi;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let extent = val(inp).shape()[*axis];
                    if let Some(dx) = self.grad_slot(grads, inp) {
                        let block = extent * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..block];
                            for (d, &s) in dx[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = val(*input).shape();
                let (outer, extent, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for o in 0..outer {
                        let dst = &mut dx[o * extent * inner + start * inner..][..len * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let rows = normalized.len() / c;
                let gam = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, xrow) in g.chunks(c).zip(normalized.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * xrow[ch];
                    }
                }
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for (d, &s) in dg.iter_mut().zip(&sum_gx) {
                        *d += s;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for (d, &s) in db.iter_mut().zip(&sum_g) {
                        *d += s;
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *input) {
                    let m = T::lit(rows as f64);
                    for ((drow, grow), xrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(normalized.chunks(c)) {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            drow[ch] += if *training {
                                scale * (grow[ch] - (sum_g[ch] + xrow[ch] * sum_gx[ch]) / m)
                            } else {
                                scale * grow[ch]
                            };
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / T::lit(batch as f64);
                if let Some(dx) = self.grad_slot(grads, *logits) {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            dx[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::EdgeFeatures {
                input,
                neighbors,
                k,
            } => {
                let ch = *val(*input).shape().last().unwrap();
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (e, &nb) in neighbors.iter().enumerate() {
                        let center = e / k;
                        let ge = &g[e * ch..(e + 1) * ch];
                        for c in 0..ch {
                            dx[center * ch + c] += ge[c];
                            dx[nb * ch + c] -= ge[c];
                        }
                    }
                }
            }
            Op::AddExpandLast { a, b } => {
                let k = *node.value.shape().last().unwrap();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for (d, row) in db.iter_mut().zip(g.chunks(k)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::WeightedNeighborSum { weights, values } => {
                let w = val(*weights).data();
                let v = val(*values).data();
                let k = *val(*weights).shape().last().unwrap();
                let f = *node.value.shape().last().unwrap();
                if let Some(dw) = self.grad_slot(grads, *weights) {
                    for (r, grow) in g.chunks(f).enumerate() {
                        for j in 0..k {
                            let vrow = &v[(r * k + j) * f..][..f];
                            dw[r * k + j] += grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if let Some(dv) = self.grad_slot(grads, *values) {
                    for (r, grow) in g.chunks(f).enumerate() {
                        for j in 0..k {
                            let wij = w[r * k + j];
                            let drow = &mut dv[(r * k + j) * f..][..f];
                            for (d, &gi) in drow.iter_mut().zip(grow) {
                                *d += wij * gi;
                            }
                        }
                    }
                }
            }
            Op::BatchMatmul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, n, p) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let q = bv.shape()[2];
                if let Some(da) = self.grad_slot(grads, *a) {
                    for bi in 0..batch {
                        gemm(
                            MatRef::row_major(&g[bi * n * q..(bi + 1) * n * q], n, q),
                            MatRef::row_major(&bv.data()[bi * p * q..(bi + 1) * p * q], p, q).t(),
                            &mut da[bi * n * p..(bi + 1) * n * p],
                            true,
                        );
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for bi in 0..batch {
                        gemm(
                            MatRef::row_major(&av.data()[bi * n * p..(bi + 1) * n * p], n, p).t(),
                            MatRef::row_major(&g[bi * n * q..(bi + 1) * n * q], n, q),
                            &mut db[bi * p * q..(bi + 1) * p * q],
                            true,
                        );
                    }
                }
            }
            Op::Expand { input, copies } => {
                let c = *node.value.shape().last().unwrap();
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (b, drow) in dx.chunks_mut(c).enumerate() {
                        for i in 0..*copies {
                            let grow = &g[(b * copies + i) * c..][..c];
                            for (d, &gi) in drow.iter_mut().zip(grow) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(dx) = self.grad_slot(grads, v) {
                        for (d, &gi) in dx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = val(other).data();
                    if let Some(dx) = self.grad_slot(grads, v) {
                        for ((d, &gi), &oi) in dx.iter_mut().zip(g).zip(o) {
                            *d += gi * oi;
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *factor;
                    }
                }
            }
        }
    }
}
