//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node; node indices are therefore already in
//! topological order and `backward` walks them in reverse.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{numel, strides, Tensor};
use crate::error::{contract_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Norm(Var),
}

#[derive(Debug, Clone)]
struct LeafMeta {
    name: Option<String>,
    /// `true` marks a frozen element; its gradient is forced to zero.
    frozen: Option<Arc<Vec<bool>>>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf: Option<LeafMeta>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient by name for parameters bound through [`Tape::param`].
    /// Unreachable parameters carry a zero tensor.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(contract_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// How a broadcast operand's elements are laid out over the output.
enum Layout {
    Same,
    /// The operand repeats whole, back to back.
    Tile,
    /// Each operand element repeats this many times in a row.
    Repeat(usize),
    /// Flat source offset for every output element.
    Map(Vec<usize>),
}

fn layout(in_shape: &[usize], out_shape: &[usize]) -> Layout {
    let n = numel(out_shape);
    let n_in = numel(in_shape);
    if in_shape == out_shape {
        return Layout::Same;
    }
    if n_in == 1 {
        return Layout::Repeat(n);
    }
    let nd = out_shape.len();
    let pad = nd - in_shape.len();
    let lead = in_shape.iter().take_while(|&&d| d == 1).count();
    if in_shape[lead..] == out_shape[pad + lead..] {
        return Layout::Tile;
    }
    let trail = in_shape.iter().rev().take_while(|&&d| d == 1).count();
    let keep = in_shape.len() - trail;
    if pad == 0 && in_shape[..keep] == out_shape[..keep] {
        return Layout::Repeat(numel(&out_shape[keep..]));
    }
    let in_str = strides(in_shape);
    let src: Vec<usize> = (0..nd)
        .map(|d| {
            if d < pad || in_shape[d - pad] == 1 {
                0
            } else {
                in_str[d - pad]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * idx[d];
            idx[d] = 0;
        }
    }
    Layout::Map(map)
}

impl Layout {
    /// Source data spread over `n` output elements.
    fn expand<'a>(&self, src: &'a [f64], n: usize) -> Cow<'a, [f64]> {
        match self {
            Layout::Same => Cow::Borrowed(src),
            Layout::Tile => Cow::Owned(src.repeat(n / src.len())),
            Layout::Repeat(r) => {
                let mut out = Vec::with_capacity(n);
                for &v in src {
                    out.extend(std::iter::repeat_n(v, *r));
                }
                Cow::Owned(out)
            }
            Layout::Map(m) => Cow::Owned(m.iter().map(|&i| src[i]).collect()),
        }
    }

    /// Sum output-shaped values back onto `n_in` source elements.
    fn reduce(&self, vals: Vec<f64>, n_in: usize) -> Vec<f64> {
        match self {
            Layout::Same => vals,
            Layout::Tile => {
                let mut out = vec![0.0; n_in];
                for chunk in vals.chunks_exact(n_in) {
                    out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                out
            }
            Layout::Repeat(r) => vals.chunks_exact(*r).map(|c| c.iter().sum()).collect(),
            Layout::Map(m) => {
                let mut out = vec![0.0; n_in];
                for (&i, v) in m.iter().zip(&vals) {
                    out[i] += v;
                }
                out
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the slices hold at least the row-major extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: as in `mm`; `b` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, g.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0, out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && out.len() >= k * n);
    // SAFETY: as in `mm`; `a` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, 1.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(contract_err!("matmul needs rank >= 2, got {:?} x {:?}", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(contract_err!("matmul inner dims differ: {:?} x {:?}", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_batched = !b_batch.is_empty();
    if b_batched && a_batch != b_batch {
        return Err(contract_err!("matmul batch dims differ: {:?} x {:?}", a, b));
    }
    let mut out = a_batch.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatMulDims {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            b_batched,
        },
        out,
    ))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            leaf: Some(LeafMeta {
                name: None,
                frozen: None,
            }),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Anonymous differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            leaf: Some(LeafMeta {
                name: None,
                frozen: None,
            }),
        });
        Var(self.nodes.len() - 1)
    }

    /// Named differentiable input. Elements where `frozen` is `true` get
    /// exactly zero gradient.
    pub fn param(&mut self, name: &str, value: Tensor, frozen: Option<Arc<Vec<bool>>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            leaf: Some(LeafMeta {
                name: Some(name.to_string()),
                frozen,
            }),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let value = if sa == sb {
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(sa, data)
        } else {
            let out = broadcast_shape(&sa, &sb)?;
            let n = numel(&out);
            let ea = layout(&sa, &out).expand(va, n);
            let eb = layout(&sb, &out).expand(vb, n);
            let data = ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(out, data)
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Square root whose derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `max(x, floor)` elementwise.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// `[..., m, k] x [k, n]` or `[..., m, k] x [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (d, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&out_shape)];
        if !d.b_batched {
            mm(va, vb, &mut out, d.batch * d.m, d.k, d.n);
            return Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), &[a, b]));
        }
        for bi in 0..d.batch {
            let ao = &va[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let bo = if d.b_batched {
                &vb[bi * d.k * d.n..(bi + 1) * d.k * d.n]
            } else {
                vb
            };
            mm(ao, bo, &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n], d.m, d.k, d.n);
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(contract_err!("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(contract_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(contract_err!("concat shape mismatch {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat(xs.to_vec(), axis),
            xs,
        ))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            parts.push(self.reshape(x, &s)?);
        }
        self.concat(&parts, 0)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(contract_err!(
                "slice axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                shape
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    /// Gather rows along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(contract_err!("index_select on a scalar"));
        }
        let inner: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(contract_err!("index {bad} out of range for {:?}", shape));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(contract_err!("axis {axis} out of range for {:?}", shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok((out_shape, outer, len, inner))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_axis(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxis { x, axis },
            &[x],
        ))
    }

    /// Mean over `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_axis(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let n = len as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis { x, axis },
            &[x],
        ))
    }

    /// Max over `axis`, keeping it with length 1. The gradient goes to the
    /// first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_axis(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    if d[base + i] > out[o * inner + i] {
                        out[o * inner + i] = d[base + i];
                        argmax[o * inner + i] = l;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MaxAxis { x, axis, argmax },
            &[x],
        ))
    }

    fn last_axis_rows(&self, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let cols = *s
            .last()
            .ok_or_else(|| contract_err!("softmax on a scalar"))?;
        Ok((numel(s) / cols.max(1), cols))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis_rows(x)?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis_rows(x)?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|e| *e -= lse);
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), &[x]))
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::Norm(x), &[x])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(n);
        let mut named = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            let mut g = g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g));
            if let Some(meta) = &node.leaf {
                if let (Some(mask), Some(t)) = (&meta.frozen, g.as_mut()) {
                    for (v, &f) in t.data_mut().iter_mut().zip(mask.iter()) {
                        if f {
                            *v = 0.0;
                        }
                    }
                }
                if let Some(name) = &meta.name {
                    let t = g
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    named.insert(name.clone(), t);
                }
            }
            out.push(g);
        }
        Ok(Gradients { grads: out, named })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce a gradient over a broadcast output back to `input`'s shape.
    fn unbroadcast(&self, input: Var, out_shape: &[usize], g: &[f64], scale: impl Fn(usize) -> f64) -> Vec<f64> {
        let in_shape = self.shape(input);
        let vals = g.iter().enumerate().map(|(k, &gv)| gv * scale(k)).collect();
        layout(in_shape, out_shape).reduce(vals, numel(in_shape))
    }

    fn operand_at(&self, v: Var, out_shape: &[usize]) -> Cow<'_, [f64]> {
        let t = self.value(v);
        layout(t.shape(), out_shape).expand(t.data(), numel(out_shape))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let oshape = out.shape();
        let y = out.data();
        let unary = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            g.iter().enumerate().map(|(k, &gv)| gv * f(k)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(*a, oshape, g, |_| 1.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(*b, oshape, g, |_| 1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(*a, oshape, g, |_| 1.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(*b, oshape, g, |_| -1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.operand_at(*b, oshape);
                    let ga = self.unbroadcast(*a, oshape, g, |k| bv[k]);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let av = self.operand_at(*a, oshape);
                    let gb = self.unbroadcast(*b, oshape, g, |k| av[k]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let bv = self.operand_at(*b, oshape);
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(*a, oshape, g, |k| 1.0 / bv[k]);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let av = self.operand_at(*a, oshape);
                    let gb = self.unbroadcast(*b, oshape, g, |k| -av[k] / (bv[k] * bv[k]));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let av = self.operand_at(*a, oshape);
                let wins_a = |k: usize| av[k] == y[k];
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(*a, oshape, g, |k| if wins_a(k) { 1.0 } else { 0.0 });
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(*b, oshape, g, |k| if wins_a(k) { 0.0 } else { 1.0 });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, unary(&|_| -1.0)),
            Op::Scale(x, c) => self.accumulate(grads, *x, unary(&|_| *c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Exp(x) => self.accumulate(grads, *x, unary(&|k| y[k])),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, unary(&|k| 1.0 / xv[k]));
            }
            Op::Sqrt(x) => {
                let f = |k: usize| if y[k] > 0.0 { 0.5 / y[k] } else { 0.0 };
                self.accumulate(grads, *x, unary(&f));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let f = |k: usize| {
                    if xv[k] > 0.0 {
                        1.0
                    } else if xv[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *x, unary(&f));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, unary(&|k| if xv[k] > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, unary(&|k| y[k] * (1.0 - y[k]))),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, unary(&|k| sigmoid(xv[k])));
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, unary(&|k| 2.0 * xv[k]));
            }
            Op::ClampMin(x, floor) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, unary(&|k| if xv[k] > *floor { 1.0 } else { 0.0 }));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (d, _) = matmul_dims(sa, sb).expect("validated at construction");
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if self.requires_grad(*a) && !d.b_batched {
                    let mut ga = vec![0.0; va.len()];
                    mm_bt(g, vb, &mut ga, d.batch * d.m, d.k, d.n);
                    self.accumulate(grads, *a, ga);
                } else if self.requires_grad(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..d.batch {
                        let bo = if d.b_batched { &vb[bi * kn..(bi + 1) * kn] } else { vb };
                        mm_bt(&g[bi * mn..(bi + 1) * mn], bo, &mut ga[bi * mk..(bi + 1) * mk], d.m, d.k, d.n);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) && !d.b_batched {
                    let mut gb = vec![0.0; vb.len()];
                    mm_at(va, g, &mut gb, d.batch * d.m, d.k, d.n);
                    self.accumulate(grads, *b, gb);
                } else if self.requires_grad(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..d.batch {
                        let range = if d.b_batched { bi * kn..(bi + 1) * kn } else { 0..kn };
                        mm_at(&va[bi * mk..(bi + 1) * mk], &g[bi * mn..(bi + 1) * mn], &mut gb[range], d.m, d.k, d.n);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gt = Tensor::from_parts(oshape.to_vec(), g.to_vec())
                    .permute(&inv)
                    .expect("inverse of a valid permutation");
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Slice { x, axis, start } => {
                let ishape = self.shape(*x);
                let (outer, full, inner) = split_axis(ishape, *axis);
                let len = oshape[*axis];
                let mut gx = vec![0.0; numel(ishape)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::IndexSelect { x, indices } => {
                let ishape = self.shape(*x);
                let inner: usize = ishape[1..].iter().product();
                let mut gx = vec![0.0; numel(ishape)];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..inner {
                        gx[i * inner + c] += g[r * inner + c];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let ishape = self.shape(*x);
                let (outer, len, inner) = split_axis(ishape, *axis);
                let c = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; numel(ishape)];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i] * c;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let ishape = self.shape(*x);
                let (outer, len, inner) = split_axis(ishape, *axis);
                let mut gx = vec![0.0; numel(ishape)];
                for o in 0..outer {
                    for i in 0..inner {
                        let l = argmax[o * inner + i];
                        gx[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let cols = *oshape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / cols.max(1) {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let cols = *oshape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / cols.max(1) {
                    let gs = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gs.iter().sum();
                    for c in 0..cols {
                        gx[r * cols + c] = gs[c] - y[r * cols + c].exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Norm(x) => {
                let xv = self.value(*x).data();
                let n = y[0];
                let gx = if n > 0.0 {
                    xv.iter().map(|v| g[0] * v / n).collect()
                } else {
                    vec![0.0; xv.len()]
                };
                self.accumulate(grads, *x, gx);
            }
        }
    }

    /// Fail with a numerical-domain error naming `what` if `v` holds NaN/inf.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite activation in {what}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_mean_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let l = t.mean(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param("a", Tensor::from_vec(vec![1.0, 2.0]), None);
        let _b = t.param("b", Tensor::from_vec(vec![3.0]), None);
        let l = t.sum(a);
        let g = t.backward(l).unwrap();
        assert_eq!(g.param("b").unwrap().data(), &[0.0]);
        assert_eq!(g.param("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_elements_get_zero_gradient() {
        let mut t = Tape::new();
        let mask = Arc::new(vec![true, false, true]);
        let a = t.param("a", Tensor::from_vec(vec![1.0, 2.0, 3.0]), Some(mask));
        let sq = t.square(a);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.param("a").unwrap().data(), &[0.0, 4.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[3]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_middle_axis() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = t.constant(Tensor::new(&[3, 1], vec![10., 20., 30.]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(
            t.value(c).data(),
            &[11., 12., 21., 22., 31., 32., 13., 14., 23., 24., 33., 34.]
        );
    }

    #[test]
    fn reshape_concat_slice_round_trip() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.37 - 3.0).collect();
        let x = t.constant(Tensor::new(&[2, 3, 4], data.clone()).unwrap());
        let a = t.slice(x, 1, 0, 1).unwrap();
        let b = t.slice(x, 1, 1, 2).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &data[..]);
        let r = t.reshape(c, &[6, 4]).unwrap();
        let back = t.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(t.value(back).data(), &data[..]);
    }

    #[test]
    fn matmul_batched_against_shared() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = t.constant(Tensor::new(&[2, 1], vec![5., 6.]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1, 1]);
        assert_eq!(t.value(c).data(), &[17., 39.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 3], vec![1., 2., 3., -1., 0., 1000.]).unwrap());
        let s = t.softmax(x).unwrap();
        let v = t.value(s).data();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.0, 4.0]));
        let s = t.sqrt(x);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.25]);
    }
}
