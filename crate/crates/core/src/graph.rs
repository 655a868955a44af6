//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates its
//! forward value eagerly and records the operation tag together with the
//! indices of its parents, so parents always precede children and a reverse
//! sweep over the node list is a valid topological order for the backward
//! pass. A new graph is built for every training step.
//!
//! Implicit broadcasting in elementwise operations is limited to leading
//! dimension expansion: the smaller operand's shape must be a suffix of the
//! larger one (a `[D]` bias against a `[B, T, D]` activation). Anything else
//! goes through [`Graph::broadcast_to`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a learnable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Parameter order is insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Powf(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Softplus(usize),
    Softmax(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    Broadcast(usize),
    Reshape(usize),
    Grl(usize, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Non-learnable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf for a learnable parameter. Repeated calls with the same id return
    /// the same node, so gradients from several uses accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, store.get(id).clone());
        self.param_leaves.insert(id, v);
        v
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = leading_broadcast(name, sa, sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (da.len(), db.len());
        let n: usize = out_shape.iter().product();
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(op(a.0, b.0), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(op, value)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x.0))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x.0, s))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x.0, p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` on the
    /// way back.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("gradient_reversal", format!("lambda = {lambda}")));
        }
        let value = self.value(x).clone();
        Ok(self.push(Op::Grl(x.0, lambda), value))
    }

    // ---- linear algebra -----------------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same leading
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            let ao = bi * dims.m * dims.k;
            let bo = if dims.shared_b { 0 } else { bi * dims.k * dims.n };
            let co = bi * dims.m * dims.n;
            gemm(
                (dims.m, dims.k, dims.n),
                &da[ao..ao + dims.m * dims.k],
                (dims.k as isize, 1),
                &db[bo..bo + dims.k * dims.n],
                (dims.n as isize, 1),
                &mut out[co..co + dims.m * dims.n],
                0.0,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a.0, b.0), value))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Transpose(x.0), value))
    }

    // ---- reductions ---------------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::invalid(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &src[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = s;
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = Tensor::new(shape, out)?;
        let op = if mean { Op::Mean(x.0, axis) } else { Op::Sum(x.0, axis) };
        Ok(self.push(op, value))
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x.0), Tensor::scalar(s))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..n {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..n {
                    out[at(a)] /= total;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(Op::Softmax(x.0, axis), value))
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.0).collect(), axis), value))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} out of bounds for axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Slice { x: x.0, axis, start }, value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x.0), value))
    }

    /// Explicit broadcast: prepends missing leading dimensions and expands
    /// size-1 dimensions to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let strides = broadcast_strides("broadcast", &src_shape, shape)?;
        let src = self.value(x).data();
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for_each_broadcast_index(shape, &strides, |src_idx| out.push(src[src_idx]));
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(Op::Broadcast(x.0), value))
    }

    /// Differentiable cosine similarity of two equal-length vectors.
    /// Zero-norm inputs are rejected.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("cosine_similarity", sa, sb));
        }
        let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
        if zero(self.value(a)) || zero(self.value(b)) {
            return Err(Error::ZeroNorm);
        }
        let ab = self.mul(a, b)?;
        let dot = self.sum_all(ab);
        let aa = self.mul(a, a)?;
        let aa = self.sum_all(aa);
        let bb = self.mul(b, b)?;
        let bb = self.sum_all(bb);
        let norms = self.mul(aa, bb)?;
        let norms = self.sqrt(norms);
        self.div(dot, norms)
    }

    // ---- backward -----------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`, if reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter in `store`; parameters that did not take
    /// part in the loss get exact zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                let g = self
                    .param_leaves
                    .get(&id)
                    .and_then(|&v| self.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                Tensor::new(t.shape().to_vec(), g).expect("grad matches parameter shape")
            })
            .collect()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |p: usize| nodes[p].value.data();

        match nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = acc(grads, nodes, a);
                let na = ga.len();
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % na] += gi;
                }
                let gb = acc(grads, nodes, b);
                let nb = gb.len();
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += sign * gi;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (na, nb) = (va.len(), vb.len());
                let ga = acc(grads, nodes, a);
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % na] += gi * vb[i % nb];
                }
                let gb = acc(grads, nodes, b);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += gi * va[i % na];
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (na, nb) = (va.len(), vb.len());
                let ga = acc(grads, nodes, a);
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % na] += gi / vb[i % nb];
                }
                let gb = acc(grads, nodes, b);
                for (i, &gi) in g.iter().enumerate() {
                    let d = vb[i % nb];
                    gb[i % nb] -= gi * va[i % na] / (d * d);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = acc(grads, nodes, x);
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
            Op::MulScalar(x, s) => {
                let gx = acc(grads, nodes, x);
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * s);
            }
            Op::Grl(x, lambda) => {
                let gx = acc(grads, nodes, x);
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += -lambda * gi);
            }
            Op::Powf(x, p) => {
                let vx = val(x);
                let gx = acc(grads, nodes, x);
                for i in 0..g.len() {
                    gx[i] += g[i] * p * vx[i].powf(p - 1.0);
                }
            }
            Op::Exp(x) => {
                let y = out.data();
                let gx = acc(grads, nodes, x);
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }
            Op::Log(x) => {
                let vx = val(x);
                let gx = acc(grads, nodes, x);
                for i in 0..g.len() {
                    gx[i] += g[i] / vx[i];
                }
            }
            Op::Sqrt(x) => {
                let y = out.data();
                let gx = acc(grads, nodes, x);
                for i in 0..g.len() {
                    gx[i] += g[i] * 0.5 / y[i];
                }
            }
            Op::Relu(x) => {
                let vx = val(x);
                let gx = acc(grads, nodes, x);
                for i in 0..g.len() {
                    if vx[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softplus(x) => {
                let vx = val(x);
                let gx = acc(grads, nodes, x);
                for i in 0..g.len() {
                    gx[i] += g[i] * sigmoid(vx[i]);
                }
            }
            Op::Softmax(x, axis) => {
                let y = out.data();
                let (outer, n, inner) = split_axis(out.shape(), axis);
                let gx = acc(grads, nodes, x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..n {
                            gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (outer, n, inner) = split_axis(nodes[x].value.shape(), axis);
                let scale = if matches!(nodes[idx].op, Op::Mean(..)) { 1.0 / n as f64 } else { 1.0 };
                let gx = acc(grads, nodes, x);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * scale);
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = acc(grads, nodes, x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Transpose(x) => {
                let s = nodes[x].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let gx = acc(grads, nodes, x);
                for b in 0..gx.len() / (r * c) {
                    let off = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[off + i * c + j] += g[off + j * r + i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(nodes[a].value.shape(), nodes[b].value.shape())
                    .expect("validated in forward");
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (dims.m, dims.k, dims.n);
                {
                    let ga = acc(grads, nodes, a);
                    for bi in 0..dims.batch {
                        let bo = if dims.shared_b { 0 } else { bi * k * n };
                        // dA = dC · Bᵀ
                        gemm(
                            (m, n, k),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &vb[bo..bo + k * n],
                            (1, n as isize),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                }
                let gb = acc(grads, nodes, b);
                for bi in 0..dims.batch {
                    let bo = if dims.shared_b { 0 } else { bi * k * n };
                    // dB = Aᵀ · dC
                    gemm(
                        (k, m, n),
                        &va[bi * m * k..(bi + 1) * m * k],
                        (1, k as isize),
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        &mut gb[bo..bo + k * n],
                        1.0,
                    );
                }
            }
            Op::Concat(ref parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[axis];
                    let gp = acc(grads, nodes, p);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[x].value.shape(), axis);
                let len = out.shape()[axis];
                let gx = acc(grads, nodes, x);
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let from = (o * n + start) * inner;
                    let dst = &mut gx[from..from + len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Broadcast(x) => {
                let strides = broadcast_strides("broadcast", nodes[x].value.shape(), out.shape())
                    .expect("validated in forward");
                let gx = acc(grads, nodes, x);
                let mut i = 0;
                for_each_broadcast_index(out.shape(), &strides, |src_idx| {
                    gx[src_idx] += g[i];
                    i += 1;
                });
            }
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> &'a mut Vec<f64> {
    grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()])
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn leading_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatMulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let lead_a = &sa[..sa.len() - 2];
    let lead_b = &sb[..sb.len() - 2];
    let shared_b = lead_b.is_empty();
    if k != kb || (!shared_b && lead_a != lead_b) {
        return Err(Error::shape("matmul", sa, sb));
    }
    Ok(MatMulDims {
        batch: lead_a.iter().product(),
        m,
        k,
        n,
        shared_b,
    })
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product with arbitrary
/// operand strides; `c` is row-major `m×n`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    // SAFETY: lengths checked above; every stride pair addresses a dense
    // m×k / k×n / m×n block within its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source strides laid out over the target shape, zero where broadcasting.
fn broadcast_strides(op: &'static str, src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(Error::shape(op, src, target));
    }
    let lead = target.len() - src.len();
    let mut src_strides = vec![0; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        src_strides[d] = acc;
        acc *= src[d];
    }
    let mut strides = vec![0; target.len()];
    for d in 0..src.len() {
        let (s, t) = (src[d], target[lead + d]);
        if s == t {
            strides[lead + d] = src_strides[d];
        } else if s != 1 {
            return Err(Error::shape(op, src, target));
        }
    }
    Ok(strides)
}

fn for_each_broadcast_index(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0; shape.len()];
    let mut src = 0;
    for _ in 0..n {
        f(src);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}
