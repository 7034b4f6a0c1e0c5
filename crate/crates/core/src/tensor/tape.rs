use super::param::{ParamId, ParamStore};
use super::value::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Zero padding on the four borders of a 2-D feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn symmetric(h: usize, w: usize) -> Self {
        Self {
            top: h,
            bottom: h,
            left: w,
            right: w,
        }
    }
}

/// Primitive kinds the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    RowSoftmax,
    RowLogSoftmax,
    Concat,
    Slice,
    Transpose2d,
    Sum,
    Mean,
    Reshape,
    Conv2d,
    MaxPool2d,
    AvgPool2d,
    EmbeddingLookup,
    RowL2Normalize,
    CustomScalar,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "elementwise_mul",
            Primitive::ScalarMul => "scalar_mul",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::RowLogSoftmax => "row_log_softmax",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Transpose2d => "transpose2d",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Reshape => "reshape",
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2d => "maxpool2d",
            Primitive::AvgPool2d => "avgpool2d",
            Primitive::EmbeddingLookup => "embedding_lookup",
            Primitive::RowL2Normalize => "row_l2_normalize",
            Primitive::CustomScalar => "custom_scalar",
        }
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    /// `b` either matches `a` or is a row vector broadcast over `a`'s rows.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
        pad: Pad2d,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    RowL2Normalize {
        input: usize,
        norms: Vec<S>,
        eps: S,
    },
    CustomScalar {
        input: usize,
        local_grad: Vec<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`, `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros of `len` when unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        self.get(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); len])
    }
}

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// Every primitive returns a [`Var`]; its value stays on the tape. Entries whose
/// inputs do not require gradients are stored as constants with no backward
/// linkage.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
    bindings: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn slice_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Number of windows along one axis in ceil mode: the last window may be
/// clipped but must start inside the input.
pub fn pooled_len(n: usize, k: usize, s: usize) -> usize {
    if n <= k {
        return 1;
    }
    let out = (n - k).div_ceil(s) + 1;
    if (out - 1) * s >= n {
        out - 1
    } else {
        out
    }
}

/// Output positions `o` in `[lo, hi)` whose input `o*s + k - pad` lies in `[0, n)`.
fn valid_range(n: usize, k: usize, s: usize, pad: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
    let hi = if n + pad > k { (n + pad - k - 1) / s + 1 } else { 0 };
    (lo.min(out), hi.min(out))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bindings: Vec::new(),
        }
    }

    /// Tape on which parameters are bound as constants; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of entries with backward linkage (non-leaf, differentiable).
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same node so gradients from every use accumulate on it.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone(), true);
        self.bindings.push((id, v));
        v
    }

    /// Stop-gradient barrier: same data, no linkage to `x`'s producers.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, kind: Primitive, value: Tensor<S>, inputs: &[usize], op: Op<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: kind.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, kind: Primitive, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(kind.name(), format!("expected 2-D input, got {:?}", self.shape(v))))
    }

    fn unary(&mut self, kind: Primitive, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(kind, value, &[a.0], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = Primitive::MatMul;
        let (m, k) = self.dims2(kind, a)?;
        let (k2, n) = self.dims2(kind, b)?;
        if k != k2 {
            return Err(Error::shape(
                kind.name(),
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(kind, Tensor::new(vec![m, n], out)?, &[a.0, b.0], Op::MatMul(a.0, b.0))
    }

    fn broadcast_check(&self, kind: Primitive, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(());
        }
        let last = *sa.last().unwrap();
        let row_vec = match sb {
            [n] => *n == last,
            [1, n] => *n == last,
            _ => false,
        };
        if row_vec && sa.len() == 2 {
            Ok(())
        } else {
            Err(Error::shape(kind.name(), format!("{sa:?} with {sb:?}")))
        }
    }

    fn binary_bcast(&mut self, kind: Primitive, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.broadcast_check(kind, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data: Vec<S> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % n]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(kind, value, &[a.0, b.0], op)
    }

    /// `a + b`; `b` may be a row vector broadcast across the rows of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast(Primitive::Add, a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast(Primitive::Sub, a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = Primitive::Mul;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                kind.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(kind, value, &[a.0, b.0], Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        self.unary(Primitive::ScalarMul, a, |x| x * k, Op::Scale(a.0, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Sigmoid, a, crate::scalar::logistic, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Tanh, a, S::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Relu, a, |x| x.max(S::zero()), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Exp, a, S::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Primitive::Log, a, S::ln, Op::Log(a.0))
    }

    fn row_map(&mut self, kind: Primitive, a: Var, f: impl Fn(&[S], &mut [S]), op: Op<S>) -> Result<Var> {
        let (_, n) = self.dims2(kind, a)?;
        let av = self.value(a);
        let mut out = vec![S::zero(); av.len()];
        for (src, dst) in av.data().chunks(n).zip(out.chunks_mut(n)) {
            f(src, dst);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(kind, value, &[a.0], op)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_map(Primitive::RowSoftmax, a, softmax_row, Op::RowSoftmax(a.0))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_map(
            Primitive::RowLogSoftmax,
            a,
            |src, dst| {
                let lse = crate::scalar::log_sum_exp(src);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            },
            Op::RowLogSoftmax(a.0),
        )
    }

    /// Row-wise `x / max(‖x‖, eps)`; zero rows map to zero rows.
    pub fn row_l2_normalize(&mut self, a: Var, eps: S) -> Result<Var> {
        let kind = Primitive::RowL2Normalize;
        let (m, n) = self.dims2(kind, a)?;
        let av = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![S::zero(); m * n];
        for (src, dst) in av.chunks(n).zip(out.chunks_mut(n)) {
            let norm = src.iter().map(|&x| x * x).sum::<S>().sqrt();
            let d = norm.max(eps);
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = x / d;
            }
            norms.push(norm);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(kind, value, &[a.0], Op::RowL2Normalize { input: a.0, norms, eps })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let kind = Primitive::Concat;
        let first = parts
            .first()
            .ok_or_else(|| Error::shape(kind.name(), "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(kind.name(), format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &x)| d == axis || x == base[d]);
            if !ok {
                return Err(Error::shape(kind.name(), format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = slice_strides(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(kind, Tensor::new(shape, out)?, &ids, Op::Concat { inputs: ids.clone(), axis })
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let kind = Primitive::Slice;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                kind.name(),
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, dim, inner) = slice_strides(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        self.push(
            kind,
            Tensor::new(new_shape, out)?,
            &[a.0],
            Op::Slice { input: a.0, axis, start },
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let kind = Primitive::Transpose2d;
        let (m, n) = self.dims2(kind, a)?;
        let d = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push(kind, Tensor::new(vec![n, m], out)?, &[a.0], Op::Transpose(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Primitive::Sum, Tensor::scalar(s), &[a.0], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<S>() / S::lit(v.len() as f64);
        self.push(Primitive::Mean, Tensor::scalar(s), &[a.0], Op::Mean(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(Primitive::Reshape, value, &[a.0], Op::Reshape(a.0))
    }

    /// Cross-correlation of `x [Cin,H,W]` with `w [Cout,Cin,kh,kw]` plus `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), pad: Pad2d) -> Result<Var> {
        let kind = Primitive::Conv2d;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let err = || Error::shape(kind.name(), format!("input {xs:?}, weight {ws:?}, bias {bs:?}"));
        let ([ci, h, wd], [co, ci2, kh, kw], [co2]) = (xs, ws, bs) else {
            return Err(err());
        };
        let (ci, h, wd, co, kh, kw) = (*ci, *h, *wd, *co, *kh, *kw);
        if ci != *ci2 || co != *co2 || stride.0 == 0 || stride.1 == 0 {
            return Err(err());
        }
        if h + pad.top + pad.bottom < kh || wd + pad.left + pad.right < kw {
            return Err(err());
        }
        let ho = (h + pad.top + pad.bottom - kh) / stride.0 + 1;
        let wo = (wd + pad.left + pad.right - kw) / stride.1 + 1;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![S::zero(); co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..ci {
                let xin = &xd[c * h * wd..(c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, ky, stride.0, pad.top, ho);
                    for kx in 0..kw {
                        let wv = wdat[((o * ci + c) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(wd, kx, stride.1, pad.left, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * stride.0 + ky - pad.top;
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * wd..(iy + 1) * wd];
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * irow[ox * stride.1 + kx - pad.left];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            kind,
            Tensor::new(vec![co, ho, wo], out)?,
            &[x.0, w.0, b.0],
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    fn pool_dims(&self, kind: Primitive, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<(usize, usize, usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] if kernel.0 > 0 && kernel.1 > 0 && stride.0 > 0 && stride.1 > 0 => Ok((
                c,
                h,
                w,
                pooled_len(h, kernel.0, stride.0),
                pooled_len(w, kernel.1, stride.1),
            )),
            _ => Err(Error::shape(
                kind.name(),
                format!("input {:?}, kernel {kernel:?}, stride {stride:?}", self.shape(x)),
            )),
        }
    }

    /// Max pooling over `[C,H,W]`, ceil mode with clipped border windows.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let kind = Primitive::MaxPool2d;
        let (c, h, w, ho, wo) = self.pool_dims(kind, x, kernel, stride)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = S::neg_infinity();
                    let mut best_i = 0;
                    for iy in oy * stride.0..(oy * stride.0 + kernel.0).min(h) {
                        for ix in ox * stride.1..(ox * stride.1 + kernel.1).min(w) {
                            let i = (ch * h + iy) * w + ix;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        self.push(kind, Tensor::new(vec![c, ho, wo], out)?, &[x.0], Op::MaxPool2d { x: x.0, argmax })
    }

    /// Average pooling over `[C,H,W]`, ceil mode; clipped windows average their valid cells.
    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let kind = Primitive::AvgPool2d;
        let (c, h, w, ho, wo) = self.pool_dims(kind, x, kernel, stride)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, y1) = (oy * stride.0, (oy * stride.0 + kernel.0).min(h));
                    let (x0, x1) = (ox * stride.1, (ox * stride.1 + kernel.1).min(w));
                    let mut acc = S::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc = acc + xd[(ch * h + iy) * w + ix];
                        }
                    }
                    out.push(acc / S::lit(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        self.push(
            kind,
            Tensor::new(vec![c, ho, wo], out)?,
            &[x.0],
            Op::AvgPool2d { x: x.0, kernel, stride },
        )
    }

    /// Gathers rows of `table [V,E]` into `[indices.len(), E]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let kind = Primitive::EmbeddingLookup;
        let (v, e) = self.dims2(kind, table)?;
        if indices.is_empty() {
            return Err(Error::shape(kind.name(), "empty index list"));
        }
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            if i >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        self.push(
            kind,
            Tensor::new(vec![indices.len(), e], out)?,
            &[table.0],
            Op::Embedding { table: table.0, indices: indices.to_vec() },
        )
    }

    /// Scalar node with an externally computed value and local gradient.
    /// Used for losses whose backward rule is analytic (CTC).
    pub fn custom_scalar(&mut self, input: Var, value: S, local_grad: Vec<S>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::shape(
                Primitive::CustomScalar.name(),
                format!("gradient of length {} for input {:?}", local_grad.len(), self.shape(input)),
            ));
        }
        if local_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "custom_scalar gradient".into() });
        }
        self.push(
            Primitive::CustomScalar,
            Tensor::scalar(value),
            &[input.0],
            Op::CustomScalar { input: input.0, local_grad },
        )
    }

    /// Reverse sweep from a scalar root. Each entry is visited once, newest first.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![S::one()]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], target: usize, f: impl FnOnce(&mut [S])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![S::zero(); self.nodes[target].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).shape()[1];
                let (ad, bd) = (val(a).data(), val(b).data());
                self.accumulate(grads, a, |ga| {
                    // ga[m,k] += g[m,n] * b^T
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc = acc + grow[j] * brow[j];
                            }
                            ga[i * k + p] = ga[i * k + p] + acc;
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    // gb[k,n] += a^T * g
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] = brow[j] + av * grow[j];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                self.accumulate(grads, a, |ga| add_into(ga, g));
                let n = val(b).len();
                self.accumulate(grads, b, |gb| {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + sign * x;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                });
            }
            &Op::Scale(a, k) => self.accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * k;
                }
            }),
            &Op::Sigmoid(a) => self.accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * out[i] * (S::one() - out[i]);
                }
            }),
            &Op::Tanh(a) => self.accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * (S::one() - out[i] * out[i]);
                }
            }),
            &Op::Relu(a) => {
                let ad = val(a).data();
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        if ad[i] > S::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                })
            }
            &Op::Exp(a) => self.accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * out[i];
                }
            }),
            &Op::Log(a) => {
                let ad = val(a).data();
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / ad[i];
                    }
                })
            }
            &Op::RowSoftmax(a) => {
                let n = node.value.shape()[1];
                self.accumulate(grads, a, |ga| {
                    for r in 0..g.len() / n {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &out[r * n..(r + 1) * n]);
                        let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            &Op::RowLogSoftmax(a) => {
                let n = node.value.shape()[1];
                self.accumulate(grads, a, |ga| {
                    for r in 0..g.len() / n {
                        let gr = &g[r * n..(r + 1) * n];
                        let total: S = gr.iter().copied().sum();
                        for j in 0..n {
                            let p = out[r * n + j].exp();
                            ga[r * n + j] = ga[r * n + j] + gr[j] - p * total;
                        }
                    }
                })
            }
            Op::RowL2Normalize { input, norms, eps } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *input, |ga| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &out[r * n..(r + 1) * n]);
                        if norm > *eps {
                            let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                            for j in 0..n {
                                ga[r * n + j] = ga[r * n + j] + (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                ga[r * n + j] = ga[r * n + j] + gr[j] / *eps;
                            }
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = slice_strides(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &p in inputs {
                    let chunk = val(p).shape()[*axis] * inner;
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = slice_strides(val(input).shape(), axis);
                let len = node.value.shape()[axis] * inner;
                self.accumulate(grads, input, |gi| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        add_into(&mut gi[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                });
            }
            &Op::Transpose(a) => {
                let (m, n) = val(a).dims2().unwrap();
                self.accumulate(grads, a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            &Op::Sum(a) => self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|x| *x = *x + g[0])),
            &Op::Mean(a) => {
                let k = g[0] / S::lit(val(a).len() as f64);
                self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|x| *x = *x + k))
            }
            &Op::Reshape(a) => self.accumulate(grads, a, |ga| add_into(ga, g)),
            &Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(node, g, grads, x, w, b, stride, pad),
            Op::MaxPool2d { x, argmax } => self.accumulate(grads, *x, |gx| {
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] = gx[i] + g[o];
                }
            }),
            &Op::AvgPool2d { x, kernel, stride } => {
                let [c, h, w] = *val(x).shape() else { unreachable!() };
                let [_, ho, wo] = *node.value.shape() else { unreachable!() };
                self.accumulate(grads, x, |gx| {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let (y0, y1) = (oy * stride.0, (oy * stride.0 + kernel.0).min(h));
                                let (x0, x1) = (ox * stride.1, (ox * stride.1 + kernel.1).min(w));
                                let share = g[(ch * ho + oy) * wo + ox] / S::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for iy in y0..y1 {
                                    for ix in x0..x1 {
                                        let i = (ch * h + iy) * w + ix;
                                        gx[i] = gx[i] + share;
                                    }
                                }
                            }
                        }
                    }
                })
            }
            Op::Embedding { table, indices } => {
                let e = val(*table).shape()[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * e..(i + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                })
            }
            Op::CustomScalar { input, local_grad } => self.accumulate(grads, *input, |gi| {
                for (x, &l) in gi.iter_mut().zip(local_grad) {
                    *x = *x + g[0] * l;
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node<S>,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
        pad: Pad2d,
    ) {
        let [ci, h, wd] = *self.nodes[x].value.shape() else { unreachable!() };
        let [co, _, kh, kw] = *self.nodes[w].value.shape() else { unreachable!() };
        let [_, ho, wo] = *node.value.shape() else { unreachable!() };
        let xd = self.nodes[x].value.data();
        let wdat = self.nodes[w].value.data();
        self.accumulate(grads, b, |gb| {
            for o in 0..co {
                gb[o] = gb[o] + g[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum();
            }
        });
        let need_w = self.nodes[w].requires_grad;
        let need_x = self.nodes[x].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let mut gw = vec![S::zero(); if need_w { wdat.len() } else { 0 }];
        let mut gx = vec![S::zero(); if need_x { xd.len() } else { 0 }];
        for o in 0..co {
            let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                let xin = &xd[c * h * wd..(c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, ky, stride.0, pad.top, ho);
                    for kx in 0..kw {
                        let wi = ((o * ci + c) * kh + ky) * kw + kx;
                        let wv = wdat[wi];
                        let (ox0, ox1) = valid_range(wd, kx, stride.1, pad.left, wo);
                        let mut acc = S::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * stride.0 + ky - pad.top;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let base = c * h * wd + iy * wd;
                            for ox in ox0..ox1 {
                                let ix = ox * stride.1 + kx - pad.left;
                                if need_w {
                                    acc = acc + grow[ox] * xin[iy * wd + ix];
                                }
                                if need_x {
                                    gx[base + ix] = gx[base + ix] + wv * grow[ox];
                                }
                            }
                        }
                        if need_w {
                            gw[wi] = gw[wi] + acc;
                        }
                    }
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, |dst| add_into(dst, &gw));
        }
        if need_x {
            self.accumulate(grads, x, |dst| add_into(dst, &gx));
        }
    }

    /// Adds the gradients of every bound parameter into its accumulator.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for &(id, v) in &self.bindings {
            if let Some(g) = grads.get(v) {
                add_into(&mut store.get_mut(id).grad, g);
            }
        }
    }

    /// The tape node a parameter was bound to, if any.
    pub fn binding(&self, id: ParamId) -> Option<Var> {
        self.bindings.iter().find(|(p, _)| *p == id).map(|&(_, v)| v)
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_row<S: Scalar>(src: &[S], dst: &mut [S]) {
    let m = src.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - m).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}
