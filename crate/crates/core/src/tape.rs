//! Straight-line reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append nodes; [`Tape::backward`] walks them once in reverse order and
//! accumulates adjoints into every node that depends on a tracked leaf.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{Param, ParamId};
use crate::scalar::{lit, Scalar};
use crate::tensor::{fmt_shape, numel_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of recorded operation, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Softmax,
    Conv1x1,
    Conv2d,
    Add,
    Sub,
    Hadamard,
    Scale,
    Relu,
    Mean,
    Sum,
    Concat,
    Slice,
    Reshape,
    Permute,
    Gather,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Softmax,
        OpKind::Conv1x1,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Gather => "gather",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE
            .into_iter()
            .chain([OpKind::Leaf])
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    Softmax { x: Var, axis: usize },
    Conv1x1 { x: Var, w: Var, b: Var, c_in: usize, c_out: usize, n: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, c_out: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Hadamard { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Gather { x: Var, index: Arc<[usize]> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Conv1x1 { .. } => OpKind::Conv1x1,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Hadamard { .. } => OpKind::Hadamard,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recording of one forward pass. Confined to a single thread of execution.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    params_tracked: bool,
    fault: Option<OpKind>,
    replay: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape whose parameters are tracked for gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            params_tracked: true,
            fault: None,
            replay: Vec::new(),
        }
    }

    /// A tape for inference: parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            params_tracked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: perturbs the adjoint of every `kind` operation during backward.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter once per tape; repeated calls return the same var.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), self.params_tracked);
        self.params.insert(p.id(), v);
        v
    }

    /// Makes later [`Tape::param`] calls for `id` resolve to `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(
                "matmul",
                format!("{} · {}", fmt_shape(sa), fmt_shape(sb)),
            ));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        let value = Tensor::new(vec![m, p], data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, p }, tracked))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(
                "softmax",
                format!("axis {axis} invalid for shape {}", fmt_shape(&shape)),
            ));
        }
        let data = kernels::softmax(self.value(x).data(), &shape, axis);
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, tracked))
    }

    /// Per-pixel linear map: `x[C_in×H×W]`, `w[C_out×C_in]`, `b[C_out]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(dim_err(
                "conv1x1",
                format!(
                    "input {}, weight {}, bias {}",
                    fmt_shape(sx),
                    fmt_shape(sw),
                    fmt_shape(sb)
                ),
            ));
        }
        let (c_in, c_out, h, wd) = (sx[0], sw[0], sx[1], sx[2]);
        let n = h * wd;
        let mut data = kernels::matmul(self.value(w).data(), self.value(x).data(), c_out, c_in, n);
        add_row_bias(&mut data, self.value(b).data(), n);
        let value = Tensor::new(vec![c_out, h, wd], data)?;
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv1x1 { x, w, b, c_in, c_out, n },
            tracked,
        ))
    }

    /// Square-kernel convolution: `x[C_in×H×W]`, `w[C_out×C_in×k×k]`, `b[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = sx.len() != 3
            || sw.len() != 4
            || sw[1] != sx[0]
            || sw[2] != sw[3]
            || sb != [sw[0]]
            || stride == 0
            || sx[1] + 2 * pad < sw[2]
            || sx[2] + 2 * pad < sw[3];
        if bad {
            return Err(dim_err(
                "conv2d",
                format!(
                    "input {}, weight {}, bias {}, stride {stride}, pad {pad}",
                    fmt_shape(sx),
                    fmt_shape(sw),
                    fmt_shape(sb)
                ),
            ));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            kernel: sw[2],
            stride,
            pad,
        };
        let c_out = sw[0];
        let n = geom.out_h() * geom.out_w();
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut data = kernels::matmul(self.value(w).data(), &cols, c_out, geom.patch_len(), n);
        add_row_bias(&mut data, self.value(b).data(), n);
        let value = Tensor::new(vec![c_out, geom.out_h(), geom.out_w()], data)?;
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, c_out }, tracked))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(op, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, tracked))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Hadamard { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Scale { x, factor }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Relu { x }, tracked)
    }

    /// Mean over all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / lit::<T>(t.numel() as f64));
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean { x }, tracked)
    }

    /// Sum over all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sum { x }, tracked)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err(
                "concat",
                format!("axis {axis} invalid for shape {}", fmt_shape(&base)),
            ));
        }
        let mut joined = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err(
                    "concat",
                    format!("{} vs {} along axis {axis}", fmt_shape(&base), fmt_shape(s)),
                ));
            }
            joined += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = joined;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let extent = self.shape(p)[axis];
                let chunk = extent * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Indices `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} of {}",
                    start + len,
                    fmt_shape(&shape)
                ),
            ));
        }
        let (outer, extent, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Output axis `i` is input axis `perm[i]`; the result is materialized.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(dim_err(
                "permute",
                format!("permutation {perm:?} for shape {}", fmt_shape(shape)),
            ));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            tracked,
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if numel_of(shape) != index.len() {
            return Err(dim_err(
                "gather",
                format!("{} indices for shape {}", index.len(), fmt_shape(shape)),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(dim_err(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, tracked))
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.hadamard(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Populates adjoints for every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss).value.numel();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(self.shape(loss))
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.replay.clear();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.replay.push(i);
            let mut contributions = self.adjoints(i, &g);
            self.grads[i] = Some(g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                if let Some((_, c)) = contributions.first_mut() {
                    for v in c.iter_mut() {
                        *v = *v * lit(1.5) + lit(0.1);
                    }
                }
            }
            for (target, c) in contributions {
                if !self.nodes[target.0].tracked {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &v)| *a = *a + v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Node indices of the operations replayed by the last backward pass.
    pub fn replay_order(&self) -> &[usize] {
        &self.replay
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    pub fn param_grad(&self, p: &Param<T>) -> Option<Tensor<T>> {
        self.params.get(&p.id()).and_then(|&v| self.grad(v))
    }

    fn adjoints(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, m, k, p } => {
                let (m, k, p) = (*m, *k, *p);
                let mut out = Vec::new();
                if self.nodes[a.0].tracked {
                    let bt = kernels::transpose(val(*b), k, p);
                    out.push((*a, kernels::matmul(g, &bt, m, p, k)));
                }
                if self.nodes[b.0].tracked {
                    let at = kernels::transpose(val(*a), m, k);
                    out.push((*b, kernels::matmul(&at, g, k, m, p)));
                }
                out
            }
            Op::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis);
                vec![(*x, dx)]
            }
            Op::Conv1x1 { x, w, b, c_in, c_out, n } => {
                let (c_in, c_out, n) = (*c_in, *c_out, *n);
                let mut out = Vec::new();
                if self.nodes[x.0].tracked {
                    let wt = kernels::transpose(val(*w), c_out, c_in);
                    out.push((*x, kernels::matmul(&wt, g, c_in, c_out, n)));
                }
                if self.nodes[w.0].tracked {
                    let xt = kernels::transpose(val(*x), c_in, n);
                    out.push((*w, kernels::matmul(g, &xt, c_out, n, c_in)));
                }
                out.push((*b, row_sums(g, c_out, n)));
                out
            }
            Op::Conv2d { x, w, b, geom, c_out } => {
                let c_out = *c_out;
                let n = geom.out_h() * geom.out_w();
                let patch = geom.patch_len();
                let mut out = Vec::new();
                if self.nodes[x.0].tracked {
                    let wt = kernels::transpose(val(*w), c_out, patch);
                    let dcols = kernels::matmul(&wt, g, patch, c_out, n);
                    out.push((*x, kernels::col2im(&dcols, geom)));
                }
                if self.nodes[w.0].tracked {
                    let cols = kernels::im2col(val(*x), geom);
                    let colst = kernels::transpose(&cols, patch, n);
                    out.push((*w, kernels::matmul(g, &colst, c_out, n, patch)));
                }
                out.push((*b, row_sums(g, c_out, n)));
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Hadamard { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    (*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&d| d * *factor).collect())],
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Mean { x } => {
                let len = val(*x).len();
                vec![(*x, vec![g[0] / lit(len as f64); len])]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Concat { parts, axis } => {
                let (outer, joined, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let extent = self.nodes[p.0].value.shape()[*axis];
                    let mut dp = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        let from = (o * joined + offset) * inner;
                        dp.extend_from_slice(&g[from..from + extent * inner]);
                    }
                    offset += extent;
                    out.push((p, dp));
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].value.shape();
                let (outer, extent, inner) = kernels::axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); numel_of(in_shape)];
                for o in 0..outer {
                    let to = (o * extent + start) * inner;
                    let from = o * len * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (dx, _) = kernels::permute(g, node.value.shape(), &inv);
                vec![(*x, dx)]
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &d) in index.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                vec![(*x, dx)]
            }
        }
    }
}

fn add_row_bias<T: Scalar>(data: &mut [T], bias: &[T], n: usize) {
    for (row, &b) in data.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn row_sums<T: Scalar>(g: &[T], rows: usize, n: usize) -> Vec<T> {
    (0..rows).map(|r| g[r * n..(r + 1) * n].iter().copied().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let z = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(z).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(z).data(), &[19.0, 22.0, 43.0, 50.0]);

        let row = tape.constant(Tensor::ones(&[1, 4]));
        let col = tape.constant(Tensor::ones(&[4, 1]));
        let z = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(z).data(), &[4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2x3] · [2x3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[1000.0, 1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.3));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v.get(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1x1_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv1x1(x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let twos = tape.constant(Tensor::full(&[3, 2, 2], 2.0));
        let ones = tape.constant(Tensor::ones(&[1, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1x1(twos, ones, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 6.0));

        let bad = tape.constant(Tensor::ones(&[2, 4]));
        assert!(tape.conv1x1(x, bad, zero).is_err());
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64).sin()));
        let zero = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let one = tape.constant(Tensor::ones(&[2, 3, 3]));
        let a = tape.add(x, zero).unwrap();
        let h = tape.hadamard(x, one).unwrap();
        assert_eq!(tape.value(a), tape.value(x));
        assert_eq!(tape.value(h), tape.value(x));

        let y = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f64));
        let c = tape.concat(&[x, y], 0).unwrap();
        assert_eq!(tape.shape(c), &[4, 3, 3]);
        let x2 = tape.slice(c, 0, 0, 2).unwrap();
        let y2 = tape.slice(c, 0, 2, 2).unwrap();
        assert_eq!(tape.value(x2), tape.value(x));
        assert_eq!(tape.value(y2), tape.value(y));

        let small = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.add(x, small).is_err());
        assert!(tape.hadamard(x, small).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let x = tape.leaf(xv.clone(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), Tensor::ones(&[2, 3]));

        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), xv.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_visits_each_op_once_in_reverse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let c = tape.constant(Tensor::ones(&[2, 2]));
        let a = tape.add(x, c).unwrap();
        let m = tape.matmul(a, x).unwrap();
        let r = tape.relu(m);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(
            tape.replay_order(),
            &[s.index(), r.index(), m.index(), a.index()]
        );
    }

    #[test]
    fn shared_param_accumulates() {
        let p = Param::new(Tensor::full(&[1], 3.0f64));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let y = tape.hadamard(a, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.param_grad(&p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let p = Param::new(Tensor::full(&[1], 3.0f64));
        let mut tape = Tape::inference();
        let a = tape.param(&p);
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(tape.param_grad(&p).is_none());
    }
}
