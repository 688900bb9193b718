//! Recorded computation tape with reverse-mode gradients.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the nodes in reverse order and accumulates adjoints. Leaves created
//! with [`Graph::constant`] never receive gradients; leaves created from a
//! [`ParamSet`] (or with [`Graph::variable`]) do.

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Neg,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Log => x.ln(),
            Activation::Abs => x.abs(),
            Activation::Square => x * x,
            Activation::Neg => -x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Log => 1.0 / x,
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Square => 2.0 * x,
            Activation::Neg => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { x: Var, act: Activation },
    Powf { x: Var, p: f64 },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    ClampMin { x: Var, lo: f64 },
    SoftmaxLast { x: Var },
    ConcatLast { xs: Vec<Var> },
    NarrowLast { x: Var, start: usize },
    SumAll { x: Var },
    SumLast { x: Var },
    Reshape { x: Var },
    Select { x: Var, axis: usize, index: usize },
    Stack { xs: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    GatherSumRows { x: Var, groups: Vec<Vec<usize>> },
    MaskedFill { x: Var, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds `scale * dL/dθ` into every parameter's gradient buffer.
    pub fn accumulate_into(&self, params: &mut ParamSet, scale: f64) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                let dst = params.get_mut(id).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }

    /// Parameter gradients in parameter order (zeros where unused).
    pub fn param_grads(&self, params: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// How an operand maps onto the broadcast output.
enum Layout {
    Same,
    /// Operand repeats cyclically (it equals a suffix of the output shape).
    Cyclic(usize),
    Strided(Vec<usize>),
}

fn layout(shape: &[usize], out: &[usize]) -> Layout {
    if shape == out {
        return Layout::Same;
    }
    let trimmed: &[usize] = {
        let lead = shape.iter().take_while(|&&d| d == 1).count();
        &shape[lead..]
    };
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return Layout::Cyclic(numel(trimmed));
    }
    Layout::Strided(broadcast_strides(shape, out))
}

/// Iterates the flat operand offsets of a strided broadcast.
fn for_each_strided(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn expand(data: &[f64], l: &Layout, out: &[usize]) -> Vec<f64> {
    match l {
        Layout::Same => data.to_vec(),
        Layout::Cyclic(len) => {
            let n = numel(out);
            let mut v = Vec::with_capacity(n);
            while v.len() < n {
                v.extend_from_slice(&data[..*len]);
            }
            v
        }
        Layout::Strided(strides) => {
            let mut v = vec![0.0; numel(out)];
            for_each_strided(out, strides, |flat, off| v[flat] = data[off]);
            v
        }
    }
}

/// Sums an output-shaped gradient back onto an operand's shape.
fn reduce_to(g: &[f64], l: &Layout, out: &[usize], target_len: usize) -> Vec<f64> {
    match l {
        Layout::Same => g.to_vec(),
        Layout::Cyclic(len) => {
            let mut r = vec![0.0; target_len];
            for chunk in g.chunks(*len) {
                for (a, b) in r.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            r
        }
        Layout::Strided(strides) => {
            let mut r = vec![0.0; target_len];
            for_each_strided(out, strides, |flat, off| r[off] += g[flat]);
            r
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on dense row-major blocks.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts of
    // `a` ([m,k] or [k,m]), `b` ([k,n] or [n,k]) and `c` ([m,n]).
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

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batched matrix product `a · b`.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the batch) or
    /// has the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` with `b` shaped `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(
        sa: &[usize],
        sb: &[usize],
        trans_b: bool,
    ) -> Option<(usize, usize, usize, usize, bool, Vec<usize>)> {
        if sa.len() < 2 || sb.len() < 2 {
            return None;
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return None;
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return None;
        }
        let nb = numel(batch_a);
        let mut out = batch_a.to_vec();
        out.push(m);
        out.push(n);
        Some((nb, m, k, n, shared_b, out))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (nb, m, k, n, shared_b, out_shape) = Self::matmul_dims(&sa, &sb, trans_b)
            .ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut c = vec![0.0; nb * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..nb {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = if shared_b {
                    bv
                } else {
                    &bv[bi * k * n..(bi + 1) * k * n]
                };
                gemm(m, k, n, ab, false, bb, trans_b, &mut c[bi * m * n..(bi + 1) * m * n], 0.0);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&out_shape, c)?,
            Op::MatMul { a, b, trans_b },
            ng,
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape("broadcast", &sa, &sb))?;
        let la = layout(&sa, &out);
        let lb = layout(&sb, &out);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = match (&la, &lb) {
            (Layout::Same, Layout::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Layout::Same, Layout::Cyclic(len)) => av
                .iter()
                .zip(bv[..*len].iter().cycle())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            (Layout::Cyclic(len), Layout::Same) => av[..*len]
                .iter()
                .cycle()
                .zip(bv)
                .map(|(&x, &y)| f(x, y))
                .collect(),
            _ => {
                let ea = expand(av, &la, &out);
                let eb = expand(bv, &lb, &out);
                ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
            }
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&out, data)?, Op::Binary { kind, a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).map(|v| act.apply(v));
        let ng = self.ng(x);
        self.push(value, Op::Unary { x, act }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Square)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Neg)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        let ng = self.ng(x);
        self.push(value, Op::Powf { x, p }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(value, Op::Scale { x, c }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::AddScalar { x }, ng)
    }

    /// `max(x, lo)`; entries at or below `lo` pass no gradient.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let value = self.value(x).map(|v| v.max(lo));
        let ng = self.ng(x);
        self.push(value, Op::ClampMin { x, lo }, ng)
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("softmax_last", t.shape(), &[]))?;
        if d == 0 {
            return Err(Error::shape("softmax_last", t.shape(), &[1]));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let value = Tensor::new(t.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SoftmaxLast { x }, ng))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &s0, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatLast { xs: xs.to_vec() }, ng))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("narrow_last", &s, &[]))?;
        if start + len > w {
            return Err(Error::Index(format!(
                "narrow [{start}, {}) outside last axis of size {w}",
                start + len
            )));
        }
        let rows = numel(&s[..s.len() - 1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::NarrowLast { x, start }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::SumAll { x }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("sum_last", &s, &[]))?;
        let data: Vec<f64> = if w == 0 {
            vec![0.0; numel(&s[..s.len() - 1])]
        } else {
            self.value(x).data().chunks(w).map(|c| c.iter().sum()).collect()
        };
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(1);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SumLast { x }, ng))
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let w = *self.shape(x).last().unwrap_or(&1);
        let s = self.sum_last(x)?;
        Ok(self.scale(s, 1.0 / w.max(1) as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::Index(format!("select axis {axis} index {index} of {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * s[axis] + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Select { x, axis, index }, ng))
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Param("stack of zero tensors".into()))?;
        let s = self.shape(*first).to_vec();
        if axis > s.len() {
            return Err(Error::Index(format!("stack axis {axis} for rank {}", s.len())));
        }
        for &x in xs {
            if self.shape(x) != s.as_slice() {
                return Err(Error::shape("stack", &s, self.shape(x)));
            }
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis..]);
        let k = xs.len();
        let mut data = vec![0.0; outer * k * inner];
        for (j, &x) in xs.iter().enumerate() {
            let src = self.value(x).data();
            for o in 0..outer {
                let dst = (o * k + j) * inner;
                data[dst..dst + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.clone();
        shape.insert(axis, k);
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Stack { xs: xs.to_vec(), axis }, ng))
    }

    /// Rows of a matrix `[r, d]` picked by index, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &s, &[0, 0]));
        }
        let (r, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::Index(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    /// For each group of row indices, the sum of those rows; an empty group
    /// yields a zero row.
    pub fn gather_sum_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_sum_rows", &s, &[0, 0]));
        }
        let (r, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; groups.len() * d];
        for (g, rows) in groups.iter().enumerate() {
            let dst = &mut data[g * d..(g + 1) * d];
            for &i in rows {
                if i >= r {
                    return Err(Error::Index(format!("row {i} out of range for {r} rows")));
                }
                for (a, b) in dst.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *a += b;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[groups.len(), d], data)?,
            Op::GatherSumRows {
                x,
                groups: groups.to_vec(),
            },
            ng,
        ))
    }

    /// Replaces entries where `mask` is true by `value`. `mask` covers the
    /// trailing axes of `x` and repeats over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = numel(&s);
        let ok = mask.is_empty() && n == 0
            || (!mask.is_empty()
                && n % mask.len() == 0
                && (0..=s.len()).any(|k| numel(&s[k..]) == mask.len()));
        if !ok {
            return Err(Error::shape("masked_fill", &s, &[mask.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for (v, &m) in data.iter_mut().zip(mask.iter().cycle()) {
            if m {
                *v = value;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&s, data)?,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::shape("backward", ov.shape(), &[]));
        }
        check_finite(ov, "backward seed")?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&delta) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (nb, m, k, n, shared_b, _) =
                    Self::matmul_dims(sa, sb, trans_b).expect("validated in forward");
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.ng(a) {
                    let mut da = vec![0.0; nb * m * k];
                    for bi in 0..nb {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = if shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gb, false, bb, !trans_b, &mut da[bi * m * k..(bi + 1) * m * k], 0.0);
                    }
                    acc(grads, a, da);
                }
                if self.ng(b) {
                    let bl = if shared_b { k * n } else { nb * k * n };
                    let mut db = vec![0.0; bl];
                    for bi in 0..nb {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let dst = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        let beta = if shared_b && bi > 0 { 1.0 } else { 0.0 };
                        if trans_b {
                            // B is [n,k]: dB = dCᵀ · A
                            gemm(n, m, k, gb, true, ab, false, dst, beta);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, ab, true, gb, false, dst, beta);
                        }
                    }
                    acc(grads, b, db);
                }
            }
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let la = layout(sa, out_shape);
                let lb = layout(sb, out_shape);
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        if self.ng(a) {
                            acc(grads, a, reduce_to(g, &la, out_shape, numel(sa)));
                        }
                        if self.ng(b) {
                            let mut r = reduce_to(g, &lb, out_shape, numel(sb));
                            if matches!(kind, BinaryKind::Sub) {
                                r.iter_mut().for_each(|v| *v = -*v);
                            }
                            acc(grads, b, r);
                        }
                    }
                    BinaryKind::Mul => {
                        if self.ng(a) {
                            let eb = expand(self.value(b).data(), &lb, out_shape);
                            let prod: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                            acc(grads, a, reduce_to(&prod, &la, out_shape, numel(sa)));
                        }
                        if self.ng(b) {
                            let ea = expand(self.value(a).data(), &la, out_shape);
                            let prod: Vec<f64> = g.iter().zip(&ea).map(|(x, y)| x * y).collect();
                            acc(grads, b, reduce_to(&prod, &lb, out_shape, numel(sb)));
                        }
                    }
                }
            }
            Op::Unary { x, act } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gi, (&xi, &yi))| gi * act.derivative(xi, yi))
                    .collect();
                acc(grads, *x, d);
            }
            Op::Powf { x, p } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &xi)| gi * p * xi.powf(p - 1.0))
                    .collect();
                acc(grads, *x, d);
            }
            Op::Scale { x, c } => acc(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar { x } => acc(grads, *x, g.to_vec()),
            Op::ClampMin { x, lo } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &xi)| if xi > *lo { *gi } else { 0.0 })
                    .collect();
                acc(grads, *x, d);
            }
            Op::SoftmaxLast { x } => {
                let y = node.value.data();
                let w = *out_shape.last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, d);
            }
            Op::ConcatLast { xs } => {
                let total = *out_shape.last().unwrap();
                let rows = numel(&out_shape[..out_shape.len() - 1]);
                let mut col = 0;
                for &x in xs {
                    let w = *self.shape(x).last().unwrap();
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        acc(grads, x, d);
                    }
                    col += w;
                }
            }
            Op::NarrowLast { x, start } => {
                let sx = self.shape(*x);
                let w = *sx.last().unwrap();
                let len = *out_shape.last().unwrap();
                let rows = numel(&sx[..sx.len() - 1]);
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    d[r * w + start..r * w + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, *x, d);
            }
            Op::SumAll { x } => {
                let n = self.value(*x).len();
                acc(grads, *x, vec![g[0]; n]);
            }
            Op::SumLast { x } => {
                let sx = self.shape(*x);
                let w = *sx.last().unwrap();
                let mut d = Vec::with_capacity(numel(sx));
                for &gi in g {
                    d.extend(std::iter::repeat_n(gi, w));
                }
                acc(grads, *x, d);
            }
            Op::Reshape { x } => acc(grads, *x, g.to_vec()),
            Op::Select { x, axis, index } => {
                let sx = self.shape(*x);
                let outer = numel(&sx[..*axis]);
                let inner = numel(&sx[axis + 1..]);
                let mut d = vec![0.0; numel(sx)];
                for o in 0..outer {
                    let base = (o * sx[*axis] + index) * inner;
                    d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                acc(grads, *x, d);
            }
            Op::Stack { xs, axis } => {
                let s = self.shape(xs[0]);
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[*axis..]);
                let k = xs.len();
                for (j, &x) in xs.iter().enumerate() {
                    if !self.ng(x) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let src = (o * k + j) * inner;
                        d.extend_from_slice(&g[src..src + inner]);
                    }
                    acc(grads, x, d);
                }
            }
            Op::GatherRows { x, idx } => {
                let sx = self.shape(*x);
                let d_ = sx[1];
                let mut d = vec![0.0; numel(sx)];
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..d_ {
                        d[i * d_ + c] += g[j * d_ + c];
                    }
                }
                acc(grads, *x, d);
            }
            Op::GatherSumRows { x, groups } => {
                let sx = self.shape(*x);
                let d_ = sx[1];
                let mut d = vec![0.0; numel(sx)];
                for (j, rows) in groups.iter().enumerate() {
                    for &i in rows {
                        for c in 0..d_ {
                            d[i * d_ + c] += g[j * d_ + c];
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::MaskedFill { x, mask } => {
                let d = g
                    .iter()
                    .zip(mask.iter().cycle())
                    .map(|(&gi, &m)| if m { 0.0 } else { gi })
                    .collect();
                acc(grads, *x, d);
            }
        }
    }
}

/// In-place stabilised softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
