//! Computation graph recorded during the forward pass.
//!
//! Every operation appends a node holding its value and enough bookkeeping
//! to run the chain rule backwards. Nodes are only ever appended, so the
//! node order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-by-column attention permission matrix; `true` means attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Arc<[bool]>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(TensorError::dim(
                "mask",
                format!("{rows}x{cols} mask needs {} entries, got {}", rows * cols, allow.len()),
            ));
        }
        Ok(Mask {
            rows,
            cols,
            allow: allow.into(),
        })
    }

    /// Lower-triangular pattern: position `i` may attend to `j` iff `j <= i`.
    pub fn causal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(TensorError::dim("causal_mask", "length must be at least 1"));
        }
        let allow = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Mask::new(n, n, allow)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
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
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    /// Input and the local derivative saved by the forward pass.
    Gelu(Var, Vec<f64>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskFill(Var, Arc<[bool]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Norm(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Forward-pass recorder. Parameters are borrowed read-only from a
/// [`ParamStore`] for the lifetime of the graph.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    frozen_vars: Vec<Option<Var>>,
    freeze: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        return Ok(a.to_vec());
    }
    if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        return Ok(b.to_vec());
    }
    Err(TensorError::shape(op, a, b))
}

/// `tanh` through one `exp`; saturates beyond |u| = 20 where it equals ±1 in f64.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    if u.abs() < 1e-4 {
        return u.tanh();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

/// `acc += sign * g`, summing `g` over the leading copies when `acc` was broadcast.
fn accumulate_broadcast(acc: &mut [f64], g: &[f64], sign: f64) {
    let n = acc.len();
    if g.len() % n == 0 {
        for chunk in g.chunks(n) {
            acc.iter_mut().zip(chunk).for_each(|(a, gv)| *a += sign * gv);
        }
    } else {
        for (k, gv) in g.iter().enumerate() {
            acc[k % n] += sign * gv;
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = fast_tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            frozen_vars: Vec::new(),
            freeze: false,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            frozen_vars: vec![None; params.len()],
            freeze: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param graph").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (a free input, not a stored parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    ///
    /// Inside [`Graph::frozen`] the leaf is a separate, non-differentiable
    /// node, so the same parameter can be trainable in one branch of the
    /// graph and fixed in another.
    pub fn param(&mut self, id: ParamId) -> Var {
        let freeze = self.freeze;
        let cache = if freeze {
            &mut self.frozen_vars
        } else {
            &mut self.param_vars
        };
        if let Some(v) = cache.get(id.0).copied().flatten() {
            return v;
        }
        assert!(self.params.is_some(), "graph has no parameter store");
        let v = Var(self.nodes.len());
        if id.0 >= cache.len() {
            cache.resize(id.0 + 1, None);
        }
        cache[id.0] = Some(v);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: !freeze,
        });
        v
    }

    /// Runs `f` with every parameter lookup returning a frozen leaf.
    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.freeze, true);
        let out = f(self);
        self.freeze = prev;
        out
    }

    /// Copies the value into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (ta.len(), tb.len());
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = if na == n && nb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if na == n && nb > 0 && n % nb == 0 {
            // Row broadcast, e.g. a bias; avoids a modulo per element.
            da.chunks(nb).flat_map(|row| row.iter().zip(db).map(|(&x, &y)| f(x, y))).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        Ok((Tensor::new(shape, data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
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

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let (y, dy): (Vec<f64>, Vec<f64>) = xv.iter().map(|&v| gelu_parts(v)).unzip();
        let t = Tensor::new(self.shape(x).to_vec(), y).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x, dy), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(TensorError::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(TensorError::shape("matmul_t", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), 1, k as isize, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::dim(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::dim("softmax", "empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Sets blocked entries of a `[rows, cols]` score matrix to `-inf`.
    pub fn mask_fill(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != [mask.rows, mask.cols] {
            return Err(TensorError::shape("mask_fill", t.shape(), &[mask.rows, mask.cols]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask.allow.iter())
            .map(|(&v, &a)| if a { v } else { f64::NEG_INFINITY })
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskFill(x, mask.allow.clone()), rg))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().unwrap_or(&0);
        if width == 0 {
            return Err(TensorError::dim("layer_norm", "last axis has length 0"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [width] || tb.shape() != [width] {
            return Err(TensorError::shape("layer_norm", t.shape(), tg.shape()));
        }
        let rows = t.len() / width;
        let d = t.data();
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..width {
                let h = (row[j] - mean) * s;
                xhat[r * width + j] = h;
                out[r * width + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Mean over the first axis of a `[n, d]` matrix, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if n == 0 {
            return Err(TensorError::dim("mean_rows", "no rows to pool"));
        }
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), rg))
    }

    /// Stacks row blocks; rank-1 inputs count as a single row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat_rows", "nothing to concatenate"))?;
        let width = *self.shape(*first).last().unwrap_or(&1);
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || *t.shape().last().unwrap_or(&1) != width {
                return Err(TensorError::shape("concat_rows", self.shape(*first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / width;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, width], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if start + len > n {
            return Err(TensorError::dim(
                "slice_rows",
                format!("rows {start}..{} out of {n}", start + len),
            ));
        }
        let data = t.data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, d], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat_cols", "nothing to concatenate"))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(TensorError::shape("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        if start + len > cols {
            return Err(TensorError::dim(
                "slice_cols",
                format!("cols {start}..{} out of {cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects rows of a `[n, d]` table by index.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = t.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::dim(
                    "gather_rows",
                    format!("row {i} out of {n}"),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2()?;
        if targets.len() != rows || rows == 0 {
            return Err(TensorError::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            if targets[r] >= cols {
                return Err(TensorError::dim(
                    "cross_entropy",
                    format!("target {} out of {cols} classes", targets[r]),
                ));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[targets[r]];
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(n), Op::L2Norm(x), rg)
    }

    /// Scales each row (or a lone vector) to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().unwrap_or(&1);
        let rows = t.len() / width.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * width..(r + 1) * width];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(TensorError::Contract(format!(
                    "cannot normalize row {r} with norm {n}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, rg))
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate_broadcast(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    accumulate_broadcast(gb, g, sign);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[i].op, Op::Div(..));
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let (na, nb) = (da.len(), db.len());
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, gv) in g.iter().enumerate() {
                        let y = db[k % nb];
                        ga[k % na] += if is_div { gv / y } else { gv * y };
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, gv) in g.iter().enumerate() {
                        let (x, y) = (da[k % na], db[k % nb]);
                        gb[k % nb] += if is_div { -gv * x / (y * y) } else { gv * x };
                    }
                }
            }
            Op::Neg(x) => self.unary_back(grads, *x, g, |_, _, gv| -gv),
            Op::Scale(x, c) => {
                let c = *c;
                self.unary_back(grads, *x, g, move |_, _, gv| gv * c)
            }
            Op::AddScalar(x) => self.unary_back(grads, *x, g, |_, _, gv| gv),
            Op::Exp(x) => self.unary_back_y(grads, *x, g, out.data(), |_, y, gv| gv * y),
            Op::Ln(x) => self.unary_back(grads, *x, g, |xv, _, gv| gv / xv),
            Op::Sqrt(x) => self.unary_back_y(grads, *x, g, out.data(), |_, y, gv| gv * 0.5 / y),
            Op::Square(x) => self.unary_back(grads, *x, g, |xv, _, gv| 2.0 * xv * gv),
            Op::Tanh(x) => {
                self.unary_back_y(grads, *x, g, out.data(), |_, y, gv| gv * (1.0 - y * y))
            }
            Op::Gelu(x, dy) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((acc, gv), d) in gx.iter_mut().zip(g).zip(dy) {
                        *acc += gv * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("matmul lhs");
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let mut tmp = vec![0.0; m * k];
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, n as isize, 1, tb.data(), 1, n as isize, &mut tmp, 0.0);
                    add_into(self.slot(grads, *a), &tmp);
                }
                if self.nodes[b.0].requires_grad {
                    let mut tmp = vec![0.0; k * n];
                    // dB = Aᵀ · G
                    gemm(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, &mut tmp, 0.0);
                    add_into(self.slot(grads, *b), &tmp);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("matmul_t lhs");
                let n = tb.shape()[0];
                if self.nodes[a.0].requires_grad {
                    let mut tmp = vec![0.0; m * k];
                    // dA = G · B
                    gemm(m, n, k, g, n as isize, 1, tb.data(), k as isize, 1, &mut tmp, 0.0);
                    add_into(self.slot(grads, *a), &tmp);
                }
                if self.nodes[b.0].requires_grad {
                    let mut tmp = vec![0.0; n * k];
                    // dB = Gᵀ · A
                    gemm(n, m, k, g, 1, n as isize, ta.data(), k as isize, 1, &mut tmp, 0.0);
                    add_into(self.slot(grads, *b), &tmp);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("transpose");
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for k in 0..*inner {
                            let base = o * len * inner + k;
                            let at = |j: usize| base + j * inner;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskFill(x, allow) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, (&gv, &a)) in g.iter().zip(allow.iter()).enumerate() {
                        if a {
                            gx[k] += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain).data();
                let width = tg.len();
                let rows = rstd.len();
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..width {
                            gb[j] += g[r * width + j];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..width {
                            gg[j] += g[r * width + j] * xhat[r * width + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let w = width as f64;
                    for r in 0..rows {
                        let off = r * width;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..width {
                            let d = g[off + j] * tg[j];
                            mean_d += d;
                            mean_dx += d * xhat[off + j];
                        }
                        mean_d /= w;
                        mean_dx /= w;
                        for j in 0..width {
                            let d = g[off + j] * tg[j];
                            gx[off + j] += rstd[r] * (d - mean_d - xhat[off + j] * mean_dx);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MeanRows(x) => {
                let (n, d) = self.value(*x).dims2().expect("mean_rows");
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += g[j] / n as f64;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        for (a, b) in gp.iter_mut().zip(&g[off..off + n]) {
                            *a += b;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, b) in gx[start * d..start * d + g.len()].iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).shape()[1];
                let (rows, len) = (out.shape()[0], out.shape()[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), g),
            Op::GatherRows { table, idx } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[row * d + j] += g[k * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                if let Some(gl) = self.slot(grads, *logits) {
                    let s = g[0] / rows as f64;
                    for r in 0..rows {
                        for j in 0..cols {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * cols + j] += s * (probs[r * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::L2Norm(x) => {
                let n = out.data()[0];
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    if n > 0.0 {
                        for (a, v) in gx.iter_mut().zip(xv) {
                            *a += g[0] * v / n;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = out.data();
                let width = y.len() / norms.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let off = r * width;
                        let dot: f64 = (0..width).map(|j| g[off + j] * y[off + j]).sum();
                        for j in 0..width {
                            gx[off + j] += (g[off + j] - y[off + j] * dot) / n;
                        }
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        let xv = self.value(x).data();
        if let Some(gx) = self.slot(grads, x) {
            for (k, gv) in g.iter().enumerate() {
                gx[k] += f(xv[k], 0.0, *gv);
            }
        }
    }

    fn unary_back_y(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        y: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if let Some(gx) = self.slot(grads, x) {
            for (k, gv) in g.iter().enumerate() {
                gx[k] += f(0.0, y[k], *gv);
            }
        }
    }

    /// Iterates over the parameter leaves that were materialised in this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

fn add_into(slot: Option<&mut Vec<f64>>, src: &[f64]) {
    if let Some(dst) = slot {
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, shaped like its value; `None` if the
    /// loss does not depend on `v` through differentiable operations.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(graph.shape(v).to_vec(), g.clone()).ok()
    }

    pub fn param_grads(&self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(graph.param_vars.len());
        for (id, v) in graph.param_vars() {
            if let Some(g) = self.grads[v.0].as_ref() {
                out.accumulate(id, g, graph.shape(v));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let x = mat(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 9.0], vec![-1.5, 2.5, 4.0]]);
        let i = g.constant(Tensor::eye(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[vec![1.0, 2.0]]));
        let b = g.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = g.constant(Tensor::zeros(&[4]));
        let msg = g.add(a, c).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        // exp(k) / (e + e² + e³)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let expect: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_axis_checks() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(g.softmax(x, 1).is_err());
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = g.layer_norm(x, one2, zero2, 1e-14).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }

        let gain0 = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(Tensor::full(&[3], 0.25));
        let x = g.constant(Tensor::vector(vec![3.0, -1.0, 8.0]));
        let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.25, 0.25]);

        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let e0 = g.constant(Tensor::zeros(&[0]));
        assert!(g.layer_norm(empty, e0, e0, 1e-5).is_err());
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_matmul_sum() {
        let a_t = mat(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b_t = mat(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![1.0, 3.0]]);
        let mut g = Graph::new();
        let a = g.input(a_t);
        let b = g.constant(b_t.clone());
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        // ones(2x2) · Bᵀ: each row is the row-sums of B.
        let row_sums: Vec<f64> = (0..3).map(|i| b_t.row(i).iter().sum()).collect();
        let ga = grads.wrt(&g, a).unwrap();
        for r in 0..2 {
            assert_eq!(ga.row(r), row_sums.as_slice());
        }
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unreachable_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0]));
        let unused = g.input(Tensor::vector(vec![5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(&g, unused).is_none());
        assert!(grads.wrt(&g, x).is_some());
    }

    #[test]
    fn frozen_params_do_not_collect_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let live = g.param(id);
        let fixed = g.frozen(|g| g.param(id));
        assert_ne!(live, fixed);
        let prod = g.mul(live, fixed).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap().param_grads(&g);
        // d(w·w_frozen)/dw = w_frozen only.
        assert_eq!(grads.get(id).unwrap().data(), &[2.0]);
    }

    #[test]
    fn broadcast_row_bias() {
        let mut g = Graph::new();
        let x = g.input(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.input(Tensor::vector(vec![10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, b).unwrap().data(), &[2.0, 2.0]);
    }
}
