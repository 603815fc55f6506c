//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so node indices are already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_offsets, broadcast_shape, permute_data, split_axis, Real, Tensor};
use crate::error::{invalid, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Dropout(Var, Vec<T>),
    Mse(Var, Var),
    MaskedMse {
        pred: Var,
        target: Var,
        mask: Vec<T>,
        count: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Snapshot of a trainable parameter. Gradients flow back into `store`
    /// on [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = if sa == sb {
            self.value(a).zip_map(self.value(b), f)
        } else {
            let out = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch(name, &sa, &sb))?;
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let oa = broadcast_offsets(&sa, &out);
            let ob = broadcast_offsets(&sb, &out);
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect();
            Tensor::new(out, data)?
        };
        Ok(self.push(value, op))
    }

    /// Elementwise `a + b` with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise `a * b` with numpy broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// `[.., m, k] @ [k, n]` or batched `[B.., m, k] @ [B.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = va.len() / k;
            T::gemm(rows, k, n, va, k as isize, 1, vb, n as isize, 1, T::zero(), &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let batches = va.len() / (m * k);
            for i in 0..batches {
                T::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..],
                    k as isize,
                    1,
                    &vb[i * k * n..],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Reorders axes, materializing the result.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != shape.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(invalid(format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(invalid("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..][..inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        Ok((reduced_shape(shape, axis), out))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis(a, axis)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Sum(a, axis)))
    }

    /// Mean over `axis`, dropping it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut data) = self.reduce_axis(a, axis)?;
        let n = T::from_usize(self.shape(a)[axis]).unwrap();
        data.iter_mut().for_each(|x| *x /= n);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Mean(a, axis)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::from_usize(v.len()).unwrap());
        self.push(value, Op::MeanAll(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent).map(|e| src[at(e)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for e in 0..extent {
                    let v = (src[at(e)] - max).exp();
                    out[at(e)] = v;
                    total += v;
                }
                for e in 0..extent {
                    out[at(e)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let dn = T::from_usize(d).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_forward(x));
        self.push(value, Op::Gelu(a))
    }

    /// Inverted dropout. Identity (no node recorded) when not training or
    /// when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value = {
            let v = self.value(a);
            let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(v.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Dropout(a, mask)))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(mismatch("mse", sp, st));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / T::from_usize(p.len()).unwrap());
        Ok(self.push(value, Op::Mse(pred, target)))
    }

    /// Squared error averaged over positions where `mask` is nonzero.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: &Tensor<T>) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(mismatch("masked_mse", sp, st));
        }
        if mask.shape() != sp {
            return Err(mismatch("masked_mse", sp, mask.shape()));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let count: T = mask.data().iter().copied().sum();
        if count <= T::zero() {
            return Err(invalid("masked_mse with an empty mask"));
        }
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .zip(mask.data())
            .map(|((&a, &b), &m)| m * (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / count);
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred,
                target,
                mask: mask.data().to_vec(),
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.get_mut(*id).grad.add_assign(&g);
            }
        }
        Ok(())
    }

    /// Gradients of a scalar `loss` with respect to every node at or before it.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |_, _, gv| gv);
                self.acc_broadcast(grads, *b, g, |_, _, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |_, _, gv| gv);
                self.acc_broadcast(grads, *b, g, |_, _, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let out = node.value.shape().to_vec();
                let va = self.broadcast_values(a, &out);
                let vb = self.broadcast_values(b, &out);
                self.acc_broadcast(grads, a, g, |k, _, gv| gv * vb[k]);
                self.acc_broadcast(grads, b, g, |k, _, gv| gv * va[k]);
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, g.map(|x| x * c));
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let data = permute_data(g.data(), g.shape(), &inverse);
                let t = Tensor::new(self.shape(*a).to_vec(), data).unwrap();
                acc(grads, *a, t);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshaped(self.shape(*a)).unwrap();
                acc(grads, *a, t);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let w = shape[*axis] * inner;
                    let mut data = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + w]);
                    }
                    offset += shape[*axis];
                    acc(grads, p, Tensor::new(shape, data).unwrap());
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut t = Tensor::zeros(&shape);
                let dst = t.data_mut();
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    dst[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, t);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let factor = match node.op {
                    Op::Mean(..) => T::one() / T::from_usize(extent).unwrap(),
                    _ => T::one(),
                };
                let mut t = Tensor::zeros(&shape);
                let dst = t.data_mut();
                for o in 0..outer {
                    for e in 0..extent {
                        for j in 0..inner {
                            dst[(o * extent + e) * inner + j] = g.data()[o * inner + j] * factor;
                        }
                    }
                }
                acc(grads, *a, t);
            }
            Op::SumAll(a) => {
                let t = Tensor::full(self.shape(*a), g.item());
                acc(grads, *a, t);
            }
            Op::MeanAll(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                let t = Tensor::full(self.shape(*a), g.item() / n);
                acc(grads, *a, t);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let shape = node.value.shape();
                let (outer, extent, inner) = split_axis(shape, *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + j;
                        let dot: T = (0..extent).map(|e| g.data()[at(e)] * y[at(e)]).sum();
                        for e in 0..extent {
                            dx[at(e)] = y[at(e)] * (g.data()[at(e)] - dot);
                        }
                    }
                }
                acc(grads, *a, Tensor::new(shape.to_vec(), dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let shape = node.value.shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = xhat.len() / d;
                let gam = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dgamma[j] += gy[j] * xh[j];
                        dbeta[j] += gy[j];
                        dxhat[j] = gy[j] * gam[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xh[j];
                    }
                    let scale = rstd[r] / dn;
                    for j in 0..d {
                        dx[r * d + j] = scale * (dn * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
                    }
                }
                acc(grads, *x, Tensor::new(shape, dx).unwrap());
                acc(grads, *gamma, Tensor::new(vec![d], dgamma).unwrap());
                acc(grads, *beta, Tensor::new(vec![d], dbeta).unwrap());
            }
            Op::Gelu(a) => {
                let t = self.value(*a).zip_map(g, |x, gv| gv * gelu_derivative(x));
                acc(grads, *a, t);
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Mse(pred, target) => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let c = T::lit(2.0) * g.item() / T::from_usize(p.len()).unwrap();
                let dp = p.zip_map(t, |a, b| c * (a - b));
                acc(grads, *target, dp.map(|x| -x));
                acc(grads, *pred, dp);
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let c = T::lit(2.0) * g.item() / *count;
                let data: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(mask)
                    .map(|((&a, &b), &m)| c * m * (a - b))
                    .collect();
                let dp = Tensor::new(p.shape().to_vec(), data).unwrap();
                acc(grads, *target, dp.map(|x| -x));
                acc(grads, *pred, dp);
            }
        }
    }

    fn broadcast_values(&self, v: Var, out: &[usize]) -> Vec<T> {
        let src = self.value(v);
        if src.shape() == out {
            return src.data().to_vec();
        }
        broadcast_offsets(src.shape(), out)
            .into_iter()
            .map(|o| src.data()[o])
            .collect()
    }

    /// Accumulates `f(k, offset, g[k])` into the gradient of `target`,
    /// reducing over broadcast axes.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        g: &Tensor<T>,
        f: impl Fn(usize, usize, T) -> T,
    ) {
        let shape = self.shape(target).to_vec();
        let mut t = Tensor::zeros(&shape);
        if shape == g.shape() {
            for (k, (dst, &gv)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                *dst = f(k, k, gv);
            }
        } else {
            let offsets = broadcast_offsets(&shape, g.shape());
            let dst = t.data_mut();
            for (k, (&o, &gv)) in offsets.iter().zip(g.data()).enumerate() {
                dst[o] += f(k, o, gv);
            }
        }
        acc(grads, target, t);
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let gd = g.data();
        let mut da = vec![T::zero(); ta.len()];
        let mut db = vec![T::zero(); tb.len()];
        if sb.len() == 2 {
            let rows = ta.len() / k;
            // dA = dC @ B^T ; dB = A^T @ dC
            T::gemm(
                rows,
                n,
                k,
                gd,
                n as isize,
                1,
                tb.data(),
                1,
                n as isize,
                T::zero(),
                &mut da,
            );
            T::gemm(
                k,
                rows,
                n,
                ta.data(),
                1,
                k as isize,
                gd,
                n as isize,
                1,
                T::zero(),
                &mut db,
            );
        } else {
            let m = sa[sa.len() - 2];
            let batches = ta.len() / (m * k);
            for i in 0..batches {
                let gi = &gd[i * m * n..];
                T::gemm(
                    m,
                    n,
                    k,
                    gi,
                    n as isize,
                    1,
                    &tb.data()[i * k * n..],
                    1,
                    n as isize,
                    T::zero(),
                    &mut da[i * m * k..(i + 1) * m * k],
                );
                T::gemm(
                    k,
                    m,
                    n,
                    &ta.data()[i * m * k..],
                    1,
                    k as isize,
                    gi,
                    n as isize,
                    1,
                    T::zero(),
                    &mut db[i * k * n..(i + 1) * k * n],
                );
            }
        }
        acc(grads, a, Tensor::new(sa.to_vec(), da).unwrap());
        acc(grads, b, Tensor::new(sb.to_vec(), db).unwrap());
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0, 2.0, 2.0, 9.0]));
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn mse_of_self_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(a, &mut store), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(a, 0.0, true, 1).unwrap(), a);
        assert_eq!(g.dropout(a, 0.7, false, 1).unwrap(), a);
        assert!(g.dropout(a, 1.0, true, 1).is_err());
        let d = g.dropout(a, 0.5, true, 3).unwrap();
        for (&y, &x) in g.value(d).data().iter().zip(&[1.0, 2.0, 3.0]) {
            assert!(y == 0.0 || y == 2.0 * x);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.5, 0.25, 8.0]));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn broadcast_add_gradient_sums_rows() {
        let mut store = ParamStore::<f64>::new();
        let bias = store.add("b", t(&[3], &[0.0; 3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0; 6]));
        let b = g.param(&store, bias);
        let y = g.add(x, b).unwrap();
        let l = g.sum_all(y);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(bias).grad.data(), &[2.0, 2.0, 2.0]);
    }
}
