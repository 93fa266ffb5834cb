//! Forward definitions of every recorded operation.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, split_axis, MatRef, Real, Tensor};

use super::tape::{Op, Tape, Var};

pub const BN_EPSILON: f64 = 1e-5;

impl<T: Real> Tape<T> {
    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(Error::domain(format!(
                "{op}: axis {axis} invalid for shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    /// `out[..., c] = Σ_k input[..., k]·weight[k, c] + bias[c]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if w.ndim() != 2 || x.shape().last() != Some(&w.shape()[0]) {
            return Err(Error::dim("affine", x.shape(), w.shape()));
        }
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        if b.shape() != [cout] {
            return Err(Error::dim("affine bias", w.shape(), b.shape()));
        }
        let rows = x.len() / cin;
        let mut data = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            data.extend_from_slice(b.data());
        }
        gemm(
            MatRef::row_major(x.data(), rows, cin),
            MatRef::row_major(w.data(), cin, cout),
            &mut data,
            true,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Affine {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Elementwise `max(x, slope·x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::domain(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let s = T::lit(slope);
        let value = self.value(input).map(|x| if x > T::zero() { x } else { s * x });
        Ok(self.push(value, Op::LeakyRelu { input, slope: s }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu { input }, &[input])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", input, axis)?;
        let x = self.value(input);
        let (outer, extent, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let max = (0..extent).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..extent {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { input, axis }, &[input]))
    }

    /// Maximum along `axis` (removed from the shape). Also returns the
    /// position along `axis` of each maximum; ties go to the lowest position.
    pub fn max_axis(&mut self, input: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        self.check_axis("reduce_max", input, axis)?;
        let x = self.value(input);
        let (outer, extent, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut values = Vec::with_capacity(outer * inner);
        let mut source = Vec::with_capacity(outer * inner);
        let mut positions = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut best = 0;
                for j in 1..extent {
                    if xd[base + j * inner] > xd[base + best * inner] {
                        best = j;
                    }
                }
                values.push(xd[base + best * inner]);
                source.push(base + best * inner);
                positions.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, values);
        Ok((self.push(value, Op::MaxAxis { input, source }, &[input]), positions))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `[start, start+len)` along `axis`; the inverse of [`Tape::concat`].
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { input, axis, start }, &[input]))
    }

    /// Per-channel normalisation over every axis but the last.
    ///
    /// Training mode uses batch statistics and returns them as
    /// `(mean, biased variance)`; inference mode uses the supplied running
    /// statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        training: bool,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let x = self.value(input);
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.value(gamma).len()
            || c != self.value(beta).len()
            || c != running_mean.len()
            || c != running_var.len()
        {
            return Err(Error::dim("batch_norm", x.shape(), self.value(gamma).shape()));
        }
        let rows = x.len() / c;
        let xd = x.data();
        let eps = T::lit(BN_EPSILON);
        let (mean, var, batch) = if training {
            let mut sum = vec![0.0f64; c];
            for row in xd.chunks(c) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
            let mut sq = vec![0.0f64; c];
            for row in xd.chunks(c) {
                for ((s, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
            let var: Vec<T> = sq.into_iter().map(|s| T::lit(s / rows as f64)).collect();
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (running_mean.to_vec(), running_var.to_vec(), None)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut normalized = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for ch in 0..c {
                let n = (row[ch] - mean[ch]) * inv_std[ch];
                normalized.push(n);
                out.push(n * gam[ch] + bet[ch]);
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            },
            &[input, gamma, beta],
        );
        Ok((var_out, batch))
    }

    /// Inverted dropout. Identity in inference mode or when `keep_prob == 1`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        keep_prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::domain(format!("keep_prob {keep_prob} not in (0,1]")));
        }
        if !training || keep_prob == 1.0 {
            return Ok(input);
        }
        let scale = T::lit(1.0 / keep_prob);
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < keep_prob {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; `logits` is `[B, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.ndim() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", x.shape(), &[labels.len()]));
        }
        let classes = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::domain(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut total = 0.0f64;
        for (row, &label) in x.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            total += (log_sum - (row[label] - max)).as_f64();
            probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
        let loss = T::lit(total / labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `out[r, j] = x[r] − x[neighbors[r·k + j]]` for an input viewed as
    /// `[rows, C]`; the output shape inserts `k` before the channel axis.
    pub fn edge_features(&mut self, input: Var, neighbors: Arc<[usize]>, k: usize) -> Result<Var> {
        let x = self.value(input);
        let c = *x.shape().last().unwrap();
        let rows = x.len() / c;
        if k == 0 || neighbors.len() != rows * k {
            return Err(Error::dim("edge_features", x.shape(), &[neighbors.len(), k]));
        }
        if let Some(&bad) = neighbors.iter().find(|&&n| n >= rows) {
            return Err(Error::domain(format!("neighbor index {bad} out of range for {rows} rows")));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(rows * k * c);
        for (e, &nb) in neighbors.iter().enumerate() {
            let center = &xd[(e / k) * c..][..c];
            let other = &xd[nb * c..][..c];
            data.extend(center.iter().zip(other).map(|(&a, &b)| a - b));
        }
        let mut shape = x.shape().to_vec();
        shape.insert(shape.len() - 1, k);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::EdgeFeatures {
                input,
                neighbors,
                k,
            },
            &[input],
        ))
    }

    /// `a[..., j] + b[...]`: `b` is broadcast along the trailing axis of `a`.
    pub fn add_expand_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != bv.ndim() + 1 || av.shape()[..bv.ndim()] != *bv.shape() {
            return Err(Error::dim("add_expand_last", av.shape(), bv.shape()));
        }
        let k = *av.shape().last().unwrap();
        let data = av
            .data()
            .chunks(k)
            .zip(bv.data())
            .flat_map(|(row, &s)| row.iter().map(move |&v| v + s))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, Op::AddExpandLast { a, b }, &[a, b]))
    }

    /// `out[r, f] = Σ_j weights[r, j] · values[r, j, f]` with weights `[..., k]`
    /// and values `[..., k, F]`.
    pub fn weighted_neighbor_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        if v.ndim() != w.ndim() + 1 || v.shape()[..w.ndim()] != *w.shape() {
            return Err(Error::dim("weighted_neighbor_sum", w.shape(), v.shape()));
        }
        let k = *w.shape().last().unwrap();
        let f = *v.shape().last().unwrap();
        let rows = w.len() / k;
        let (wd, vd) = (w.data(), v.data());
        let mut data = vec![T::zero(); rows * f];
        for r in 0..rows {
            let out = &mut data[r * f..(r + 1) * f];
            for j in 0..k {
                let wij = wd[r * k + j];
                for (o, &vv) in out.iter_mut().zip(&vd[(r * k + j) * f..][..f]) {
                    *o += wij * vv;
                }
            }
        }
        let mut shape = w.shape().to_vec();
        *shape.last_mut().unwrap() = f;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::WeightedNeighborSum { weights, values }, &[weights, values]))
    }

    /// `[B, N, P] · [B, P, Q] → [B, N, Q]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[1] {
            return Err(Error::dim("batch_matmul", av.shape(), bv.shape()));
        }
        let (batch, n, p, q) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut data = vec![T::zero(); batch * n * q];
        for bi in 0..batch {
            gemm(
                MatRef::row_major(&av.data()[bi * n * p..(bi + 1) * n * p], n, p),
                MatRef::row_major(&bv.data()[bi * p * q..(bi + 1) * p * q], p, q),
                &mut data[bi * n * q..(bi + 1) * n * q],
                false,
            );
        }
        let value = Tensor::from_parts(vec![batch, n, q], data);
        Ok(self.push(value, Op::BatchMatmul { a, b }, &[a, b]))
    }

    /// `[B, C] → [B, copies, C]` by repetition.
    pub fn expand(&mut self, input: Var, copies: usize) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 2 || copies == 0 {
            return Err(Error::dim("expand", x.shape(), &[copies]));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(b * copies * c);
        for row in x.data().chunks(c) {
            for _ in 0..copies {
                data.extend_from_slice(row);
            }
        }
        let value = Tensor::from_parts(vec![b, copies, c], data);
        Ok(self.push(value, Op::Expand { input, copies }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let value = self.value(input).map(|x| x * f);
        self.push(value, Op::Scale { input, factor: f }, &[input])
    }
}
