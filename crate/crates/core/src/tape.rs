//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] is append-only: every operation pushes one node holding its
//! value and the inputs it was computed from. Node indices therefore form a
//! topological order, and [`Tape::backward`] walks them in strictly
//! decreasing index order. That fixed order makes gradient accumulation
//! bit-reproducible.
//!
//! Parameters enter a tape through [`Tape::param`]. Frozen parameters become
//! constant leaves: no gradient is propagated towards them, and any sub-graph
//! that depends only on constants is skipped entirely during backward.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined operation: `(inputs, output, upstream
/// grad) -> one optional gradient per input`.
pub type CustomBackward<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Bce { s: Var, y: Vec<T>, rows: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of leaf and parameter nodes from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.len())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradients (data, labels).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported in [`Gradients`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree for {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Sum of any number of same-shape tensors, folded left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Shape("add_all: no operands".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut t = self.value(x).clone();
        t.scale_in_place(c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean_axis: axis {axis} invalid for {shape:?}")));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = T::ONE / T::from_f64(n as f64);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax: axis {axis} invalid for {shape:?}")));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let mut out = vec![T::ZERO; self.value(x).len()];
        kernels::softmax(self.value(x).data(), &mut out, outer, n, inner);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Standardize over the last axis, then apply the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match feature dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `x[C_in×L] ⋆ w[C_out×C_in×k] + b[C_out]`, cross-correlation with zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let d = self.conv_dims(x, w, b, stride, padding)?;
        let mut out = vec![T::ZERO; d.c_out * d.out_len];
        kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new([d.c_out, d.out_len], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    fn conv_dims(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<ConvDims> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv1d: input {xs:?} incompatible with kernel {ws:?}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv1d bias", ws, self.shape(b)));
            }
        }
        let out_len = kernels::conv1d_out_len(xs[1], ws[2], stride, padding).ok_or_else(|| {
            Error::Shape(format!(
                "conv1d: kernel {} larger than padded input {} (padding {padding})",
                ws[2],
                xs[1] + 2 * padding
            ))
        })?;
        Ok(ConvDims {
            c_in: xs[0],
            len: xs[1],
            c_out: ws[0],
            kernel: ws[2],
            stride,
            padding,
            out_len,
        })
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| if v > T::ZERO { v } else { T::ZERO }, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} invalid for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Shape(format!("transpose: expected rank 2, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice: [{start}, {}) out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Binary cross-entropy on raw logits, summed over the last axis and
    /// averaged over rows: `mean_rows Σ_k softplus(s_k) − y_k·s_k`.
    pub fn bce_with_logits(&mut self, s: Var, y: &Tensor<T>) -> Result<Var> {
        if self.shape(s) != y.shape() {
            return Err(shape_err("bce_with_logits", self.shape(s), y.shape()));
        }
        if let Some(bad) = y.data().iter().find(|&&v| v != T::ZERO && v != T::ONE) {
            return Err(Error::Validation(format!("target {bad} is not in {{0, 1}}")));
        }
        let shape = self.shape(s);
        let rows = if shape.len() >= 2 { shape[..shape.len() - 1].iter().product() } else { 1 };
        let total: T = self
            .value(s)
            .data()
            .iter()
            .zip(y.data())
            .map(|(&sv, &yv)| kernels::softplus(sv) - yv * sv)
            .sum();
        let loss = total / T::from_f64(rows as f64);
        let rg = self.rg(s);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                s,
                y: y.data().to_vec(),
                rows,
            },
            rg,
        ))
    }

    /// Record a user-defined operation with an explicit backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Propagate `d loss / d node` through the tape and add parameter
    /// gradients into `store` (trainable parameters only).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::ONE));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    store.accumulate_grad(*id, &g);
                    grads[i] = Some(g);
                    continue;
                }
                _ => self.propagate(node, &g, &mut grads),
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, make: impl FnOnce() -> Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc(grads, *a, || {
                    let mut out = vec![T::ZERO; m * k];
                    kernels::matmul_bt_acc(gd, bv.data(), &mut out, m, k, n);
                    Tensor::new([m, k], out).unwrap()
                });
                self.acc(grads, *b, || {
                    let mut out = vec![T::ZERO; k * n];
                    kernels::matmul_at_acc(av.data(), gd, &mut out, m, k, n);
                    Tensor::new([k, n], out).unwrap()
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_map(g, bv, |x, y| x * y));
                self.acc(grads, *b, || zip_map(g, av, |x, y| x * y));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *b, || {
                    let n = self.shape(*b)[0];
                    let mut out = vec![T::ZERO; n];
                    for row in gd.chunks(n) {
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::new([n], out).unwrap()
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, || {
                let mut t = g.clone();
                t.scale_in_place(*c);
                t
            }),
            Op::Sum(x) => self.acc(grads, *x, || {
                Tensor::full(self.shape(*x).to_vec(), gd[0])
            }),
            Op::MeanAxis { x, axis } => self.acc(grads, *x, || {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = kernels::split_axis(&shape, *axis);
                let inv = T::ONE / T::from_f64(n as f64);
                let mut out = vec![T::ZERO; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[(o * n + k) * inner + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                Tensor::new(shape, out).unwrap()
            }),
            Op::Softmax { x, axis } => self.acc(grads, *x, || {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = kernels::split_axis(&shape, *axis);
                let mut out = vec![T::ZERO; node.value.len()];
                kernels::softmax_backward(node.value.data(), gd, &mut out, outer, n, inner);
                Tensor::new(shape, out).unwrap()
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, || {
                    let inv_d = T::ONE / T::from_f64(d as f64);
                    let mut out = vec![T::ZERO; gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            out[r * d + j] = rs * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                    Tensor::new(self.shape(*x).to_vec(), out).unwrap()
                });
                self.acc(grads, *gamma, || {
                    let mut out = vec![T::ZERO; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            out[j] += gr[j] * hr[j];
                        }
                    }
                    Tensor::new([d], out).unwrap()
                });
                self.acc(grads, *beta, || {
                    let mut out = vec![T::ZERO; d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            out[j] += gr[j];
                        }
                    }
                    Tensor::new([d], out).unwrap()
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let d = self.conv_dims(*x, *w, *b, *stride, *padding).unwrap();
                let want_x = self.rg(*x);
                let want_w = self.rg(*w);
                let want_b = b.is_some_and(|b| self.rg(b));
                let mut gx = want_x.then(|| vec![T::ZERO; d.c_in * d.len]);
                let mut gw = want_w.then(|| vec![T::ZERO; d.c_out * d.c_in * d.kernel]);
                let mut gb = want_b.then(|| vec![T::ZERO; d.c_out]);
                kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    &d,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, || Tensor::new([d.c_in, d.len], gx).unwrap());
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, || {
                        Tensor::new([d.c_out, d.c_in, d.kernel], gw).unwrap()
                    });
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    self.acc(grads, *b, || Tensor::new([d.c_out], gb).unwrap());
                }
            }
            Op::Relu(x) => self.acc(grads, *x, || {
                zip_map(g, self.value(*x), |gv, xv| if xv > T::ZERO { gv } else { T::ZERO })
            }),
            Op::Gelu(x) => self.acc(grads, *x, || {
                zip_map(g, self.value(*x), |gv, xv| gv * kernels::gelu_grad(xv))
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, || {
                zip_map(g, &node.value, |gv, yv| gv * yv * (T::ONE - yv))
            }),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = kernels::split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    self.acc(grads, v, || {
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        Tensor::new(self.shape(v).to_vec(), out).unwrap()
                    });
                    offset += n;
                }
            }
            Op::Permute { x, perm } => self.acc(grads, *x, || {
                let (data, shape) =
                    kernels::permute(gd, node.value.shape(), &kernels::inverse_perm(perm));
                Tensor::new(shape, data).unwrap()
            }),
            Op::Reshape(x) => self.acc(grads, *x, || {
                g.clone().reshaped(self.shape(*x).to_vec()).unwrap()
            }),
            Op::Slice { x, axis, start } => self.acc(grads, *x, || {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = kernels::split_axis(&shape, *axis);
                let len = node.value.shape()[*axis];
                let mut out = vec![T::ZERO; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    out[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                Tensor::new(shape, out).unwrap()
            }),
            Op::Bce { s, y, rows } => self.acc(grads, *s, || {
                let scale = gd[0] / T::from_f64(*rows as f64);
                let sv = self.value(*s);
                let data = sv
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&x, &t)| (kernels::sigmoid(x) - t) * scale)
                    .collect();
                Tensor::new(sv.shape().to_vec(), data).unwrap()
            }),
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(&vals, &node.value, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, v, || gi);
                    }
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}
