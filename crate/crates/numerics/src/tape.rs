//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order.

use std::collections::HashMap;

use crate::error::{dim_err, NumericsError, Result};
use crate::params::ParameterStore;
use crate::tensor::{broadcast_shape, for_each_broadcast, gemm, order_free_sum, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat(Vec<Var>),
    PoolMean { x: Var, weights: Vec<f64> },
    PoolMax { x: Var, argmax: Vec<usize> },
    LogSoftmax(Var),
    Nll { logp: Var, targets: Vec<usize> },
    RowNorm(Var),
    SymFromUpper { v: Var, k: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
    order_free: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose node-axis reductions (batched products, axis sums and
    /// mean pooling) give bit-identical results under any permutation of the
    /// summed terms. Slower; meant for inference.
    pub fn order_free() -> Self {
        Self {
            order_free: true,
            ..Self::default()
        }
    }

    pub fn is_order_free(&self) -> bool {
        self.order_free
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
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn bindings(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bindings.iter()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a trainable parameter. Repeated binds of the same name share a node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(*v);
        }
        let value = store.get(name)?.clone();
        let v = self.leaf(value);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a parameter as a constant (frozen model).
    pub fn frozen(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        Ok(self.constant(value))
    }

    // ----- elementwise binary (broadcasting) -----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(&ta.shape, &tb.shape).map_err(|e| match e {
            NumericsError::Dimension { detail, .. } => NumericsError::Dimension { op: name, detail },
            other => other,
        })?;
        let data = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let mut data = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &ta.shape, &tb.shape, |o, i, j| {
                data[o] = f(ta.data[i], tb.data[j]);
            });
            data
        };
        Ok((Tensor { shape: out_shape, data }, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data.iter().any(|x| *x == 0.0) {
            return Err(NumericsError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| f(*v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data.iter().find(|v| !(**v > 0.0)) {
            return Err(NumericsError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data.iter().find(|v| **v < 0.0) {
            return Err(NumericsError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `x^p` for strictly positive `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.nodes[x.0].value.data.iter().any(|v| !(*v > 0.0)) {
            return Err(NumericsError::Domain {
                op: "powf",
                detail: "non-positive base".into(),
            });
        }
        Ok(self.unary(x, Op::Powf(x, p), |v| v.powf(p)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    // ----- linear algebra -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape[1] != tb.shape[0] {
            return dim_err("matmul", format!("{:?} x {:?}", ta.shape, tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        if self.order_free {
            // plain loops: each output depends only on its own row, whatever its position
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = (0..k).fold(0.0, |s, p| s + ta.data[i * k + p] * tb.data[p * n + j]);
                }
            }
        } else {
            gemm(m, k, n, &ta.data, (k as isize, 1), &tb.data, (n as isize, 1), 0.0, &mut out);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape[0] != tb.shape[0] || ta.shape[2] != tb.shape[1] {
            return dim_err("bmm", format!("{:?} x {:?}", ta.shape, tb.shape));
        }
        let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
        let mut out = vec![0.0; bs * m * n];
        if self.order_free {
            let mut terms = Vec::with_capacity(k);
            let mut support = Vec::with_capacity(k);
            for b in 0..bs {
                let (pa, pb) = (&ta.data[b * m * k..], &tb.data[b * k * n..]);
                for i in 0..m {
                    // zero products are dropped by the sum anyway
                    support.clear();
                    support.extend((0..k).filter(|&p| pa[i * k + p] != 0.0));
                    for j in 0..n {
                        terms.clear();
                        terms.extend(support.iter().map(|&p| pa[i * k + p] * pb[p * n + j]));
                        out[b * m * n + i * n + j] = order_free_sum(&mut terms);
                    }
                }
            }
        } else {
            for b in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data[b * m * k..(b + 1) * m * k],
                    (k as isize, 1),
                    &tb.data[b * k * n..(b + 1) * k * n],
                    (n as isize, 1),
                    0.0,
                    &mut out[b * m * n..(b + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![bs, m, n], data: out }, Op::BatchMatMul(a, b), rg))
    }

    // ----- shape -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return dim_err("concat", "no inputs");
        }
        let lead = {
            let s = self.shape(xs[0]);
            if s.is_empty() {
                return dim_err("concat", "scalar input");
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return dim_err("concat", format!("{:?} vs leading {:?}", s, lead));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[x.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(xs);
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec()), rg))
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() {
            return dim_err("sum_axis", format!("axis {axis} on {:?}", t.shape));
        }
        let outer: usize = t.shape[..axis].iter().product();
        let len = t.shape[axis];
        let inner: usize = t.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        if self.order_free {
            let mut terms = Vec::with_capacity(len);
            for o in 0..outer {
                for i in 0..inner {
                    terms.clear();
                    terms.extend((0..len).map(|l| t.data[(o * len + l) * inner + i]));
                    out[o * inner + i] = order_free_sum(&mut terms);
                }
            }
        } else {
            for o in 0..outer {
                for l in 0..len {
                    let src = &t.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::SumAxis { x, outer, len, inner }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| NumericsError::Dimension { op: "mean_axis", detail: format!("axis {axis}") })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    fn check_pool(&self, x: Var, mask: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || mask.shape != [s[0], s[1]] {
            return dim_err(op, format!("x {:?}, mask {:?}", s, mask.shape));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Masked mean over the node axis: `[B, k, c]` with mask `[B, k]` -> `[B, c]`.
    pub fn pool_mean(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let (bs, k, c) = self.check_pool(x, mask, "pool_mean")?;
        let t = &self.nodes[x.0].value;
        let mut weights = vec![0.0; bs * k];
        let mut out = vec![0.0; bs * c];
        let mut terms = Vec::with_capacity(k);
        for b in 0..bs {
            let count = mask.data[b * k..(b + 1) * k].iter().filter(|m| **m != 0.0).count();
            if count == 0 {
                return Err(NumericsError::Contract("pool_mean over a graph with no nodes".into()));
            }
            let w = 1.0 / count as f64;
            for i in 0..k {
                if mask.data[b * k + i] != 0.0 {
                    weights[b * k + i] = w;
                }
            }
            for ch in 0..c {
                let vals = (0..k)
                    .filter(|i| mask.data[b * k + i] != 0.0)
                    .map(|i| t.data[(b * k + i) * c + ch]);
                let s = if self.order_free {
                    terms.clear();
                    terms.extend(vals);
                    order_free_sum(&mut terms)
                } else {
                    vals.sum::<f64>()
                };
                out[b * c + ch] = s * w;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![bs, c], data: out }, Op::PoolMean { x, weights }, rg))
    }

    /// Masked max over the node axis; padded rows never win.
    pub fn pool_max(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let (bs, k, c) = self.check_pool(x, mask, "pool_max")?;
        let t = &self.nodes[x.0].value;
        let mut out = vec![f64::NEG_INFINITY; bs * c];
        let mut argmax = vec![usize::MAX; bs * c];
        for b in 0..bs {
            for i in 0..k {
                if mask.data[b * k + i] == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let idx = (b * k + i) * c + ch;
                    if t.data[idx] > out[b * c + ch] {
                        out[b * c + ch] = t.data[idx];
                        argmax[b * c + ch] = idx;
                    }
                }
            }
        }
        if argmax.iter().any(|a| *a == usize::MAX) {
            return Err(NumericsError::Contract("pool_max over a graph with no nodes".into()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![bs, c], data: out }, Op::PoolMax { x, argmax }, rg))
    }

    // ----- losses and misc -----

    /// Row-wise log-softmax of a `[B, C]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.ndim() != 2 {
            return dim_err("log_softmax", format!("{:?}", t.shape));
        }
        let c = t.shape[1];
        let mut out = t.data.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax(x), rg))
    }

    /// Per-row negative log likelihood `-logp[b, target_b]`, shape `[B]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.nodes[logp.0].value;
        if t.ndim() != 2 || t.shape[0] != targets.len() {
            return dim_err("nll", format!("{:?} with {} targets", t.shape, targets.len()));
        }
        let c = t.shape[1];
        if let Some(bad) = targets.iter().find(|y| **y >= c) {
            return dim_err("nll", format!("target {bad} out of {c} classes"));
        }
        let data = targets.iter().enumerate().map(|(b, y)| -t.data[b * c + y]).collect();
        let rg = self.rg(&[logp]);
        Ok(self.push(
            Tensor { shape: vec![targets.len()], data },
            Op::Nll { logp, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Euclidean norm over the last axis. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let Some((&c, lead)) = t.shape.split_last() else {
            return dim_err("row_norm", "scalar input");
        };
        let data = t.data.chunks(c.max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let shape = lead.to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::RowNorm(x), rg))
    }

    /// Builds symmetric hollow `[B, k, k]` matrices from `[B, k(k-1)/2]`
    /// strict-upper-triangle entries in row-major `(i < j)` order.
    pub fn sym_from_upper(&mut self, v: Var, k: usize) -> Result<Var> {
        let t = &self.nodes[v.0].value;
        let pairs = k * k.saturating_sub(1) / 2;
        if t.ndim() != 2 || t.shape[1] != pairs {
            return dim_err("sym_from_upper", format!("{:?} for k={k}", t.shape));
        }
        let bs = t.shape[0];
        let mut out = vec![0.0; bs * k * k];
        for b in 0..bs {
            let mut p = 0;
            for i in 0..k {
                for j in i + 1..k {
                    let x = t.data[b * pairs + p];
                    out[b * k * k + i * k + j] = x;
                    out[b * k * k + j * k + i] = x;
                    p += 1;
                }
            }
        }
        let rg = self.rg(&[v]);
        Ok(self.push(Tensor { shape: vec![bs, k, k], data: out }, Op::SymFromUpper { v, k }, rg))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`. Returns gradients of every leaf
    /// that required them (zeros if the leaf is unreachable from `loss`).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if n.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (val(*a).shape.clone(), val(*b).shape.clone());
                acc(*a, &mut |ga| {
                    if sa == out.shape {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    } else {
                        for_each_broadcast(&out.shape, &sa, &sb, |o, i, _| ga[i] += g[o]);
                    }
                });
                acc(*b, &mut |gb| {
                    if sb == out.shape {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    } else {
                        for_each_broadcast(&out.shape, &sa, &sb, |o, _, j| gb[j] += sign * g[o]);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for_each_broadcast(&out.shape, &ta.shape, &tb.shape, |o, i, j| ga[i] += g[o] * tb.data[j])
                });
                acc(*b, &mut |gb| {
                    for_each_broadcast(&out.shape, &ta.shape, &tb.shape, |o, i, j| gb[j] += g[o] * ta.data[i])
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for_each_broadcast(&out.shape, &ta.shape, &tb.shape, |o, i, j| ga[i] += g[o] / tb.data[j])
                });
                acc(*b, &mut |gb| {
                    for_each_broadcast(&out.shape, &ta.shape, &tb.shape, |o, i, j| {
                        gb[j] -= g[o] * ta.data[i] / (tb.data[j] * tb.data[j])
                    })
                });
            }
            Op::Neg(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, y)| *d -= y)),
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, y)| *d += c * y)),
            Op::Shift(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, y)| *d += y)),
            Op::Relu(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    let y = out.data[i];
                    gx[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out.data[i];
                }
            }),
            Op::Log(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    if out.data[i] > 0.0 {
                        gx[i] += g[i] * 0.5 / out.data[i];
                    }
                }
            }),
            Op::Square(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += 2.0 * xv[i] * g[i];
                    }
                })
            }
            Op::Powf(x, p) => {
                let xv = &val(*x).data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * p * xv[i].powf(p - 1.0);
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &val(*x).data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G B^T ; dB = A^T G
                acc(*a, &mut |ga| gemm(m, n, k, g, (n as isize, 1), &tb.data, (1, n as isize), 1.0, ga));
                acc(*b, &mut |gb| gemm(k, m, n, &ta.data, (1, k as isize), g, (n as isize, 1), 1.0, gb));
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n as isize, 1),
                            &tb.data[i * k * n..],
                            (1, n as isize),
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data[i * m * k..],
                            (1, k as isize),
                            &g[i * m * n..],
                            (n as isize, 1),
                            1.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, y)| *d += y)),
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Concat(xs) => {
                let rows = out.numel() / out.shape.last().copied().unwrap_or(1).max(1);
                let total = *out.shape.last().unwrap_or(&0);
                let mut offset = 0;
                for x in xs {
                    let w = *val(*x).shape.last().unwrap_or(&0);
                    acc(*x, &mut |gx| {
                        for r in 0..rows {
                            for c in 0..w {
                                gx[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::PoolMean { x, weights } => {
                let s = &val(*x).shape;
                let (bs, k, c) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| {
                    for b in 0..bs {
                        for i in 0..k {
                            let w = weights[b * k + i];
                            if w != 0.0 {
                                for ch in 0..c {
                                    gx[(b * k + i) * c + ch] += w * g[b * c + ch];
                                }
                            }
                        }
                    }
                })
            }
            Op::PoolMax { x, argmax } => acc(*x, &mut |gx| {
                for (o, src) in argmax.iter().enumerate() {
                    gx[*src] += g[o];
                }
            }),
            Op::LogSoftmax(x) => {
                let c = out.shape[1];
                acc(*x, &mut |gx| {
                    for (r, (grow, orow)) in g.chunks(c).zip(out.data.chunks(c)).enumerate() {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += grow[j] - orow[j].exp() * gs;
                        }
                    }
                })
            }
            Op::Nll { logp, targets } => {
                let c = val(*logp).shape[1];
                acc(*logp, &mut |gx| {
                    for (b, y) in targets.iter().enumerate() {
                        gx[b * c + y] -= g[b];
                    }
                })
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let c = *xv.shape.last().unwrap();
                acc(*x, &mut |gx| {
                    for (r, norm) in out.data.iter().enumerate() {
                        if *norm > 0.0 {
                            for j in 0..c {
                                gx[r * c + j] += g[r] * xv.data[r * c + j] / norm;
                            }
                        }
                    }
                })
            }
            Op::SymFromUpper { v, k } => {
                let k = *k;
                let pairs = k * (k - 1) / 2;
                let bs = val(*v).shape[0];
                acc(*v, &mut |gv| {
                    for b in 0..bs {
                        let mut p = 0;
                        for i in 0..k {
                            for j in i + 1..k {
                                gv[b * pairs + p] += g[b * k * k + i * k + j] + g[b * k * k + j * k + i];
                                p += 1;
                            }
                        }
                    }
                })
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).data[0], 0.5);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[0], 0.25);
    }

    #[test]
    fn relu_dead_region() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-0.5, -2.0, -1e-3]));
        let y = t.relu(x);
        assert!(t.value(y).data.iter().all(|v| *v == 0.0));
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.1, 1.0, 7.5]));
        let l = t.log(x).unwrap();
        let e = t.exp(l);
        for (a, b) in t.value(e).data.iter().zip(&t.value(x).data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(NumericsError::Domain { .. })));
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[3, 4]));
        let b = t.leaf(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, b), Err(NumericsError::Dimension { op: "add", .. })));
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(a), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::from_vec(vec![3.0, -1.0, 2.0]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gives_w() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::from_vec(vec![3.0, -1.0, 2.0]));
        let sq = t.square(w);
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3.0, -1.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut t = Tape::new();
        let i3 = t.constant(Tensor::eye(3));
        let z = t.constant(Tensor::zeros(&[3, 3]));
        let bv = t.constant(b.clone());
        let ib = t.matmul(i3, bv).unwrap();
        assert_eq!(t.value(ib), &b);
        let zb = t.matmul(z, bv).unwrap();
        assert!(t.value(zb).data.iter().all(|v| *v == 0.0));
        let bad = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.matmul(bv, i3).is_err());
        assert!(t.matmul(bad, bv).is_err());
    }

    #[test]
    fn pools_on_constant_embeddings_agree() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 4, 3], 0.7));
        let mask = Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let mp = t.pool_mean(x, &mask).unwrap();
        let xp = t.pool_max(x, &mask).unwrap();
        for v in t.value(mp).data.iter().chain(&t.value(xp).data) {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_max_ignores_padding() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3, 1], vec![-5.0, -4.0, 100.0]).unwrap());
        let mask = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let m = t.pool_max(x, &mask).unwrap();
        assert_eq!(t.value(m).data, vec![-4.0]);
    }

    #[test]
    fn sym_from_upper_layout() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sym_from_upper(v, 3).unwrap();
        assert_eq!(
            t.value(s).data,
            vec![0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0]
        );
    }
}
