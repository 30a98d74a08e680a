//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Tape`] records every operation executed during one forward pass.
//! Each node stores its value together with whatever local derivative data
//! the backward sweep needs. [`Tape::backward`] walks the nodes in reverse
//! execution order and returns the gradient of a scalar root with respect to
//! every node that requires one.
//!
//! Binary elementwise ops (`add`, `sub`, `mul`) broadcast when one operand's
//! shape is a trailing suffix of the other's, or when it holds a single
//! element. Gradients of the smaller operand are summed over the repeats.
//!
//! GELU uses the tanh approximation
//! `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))` and its exact derivative.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Element `(i, j, k)` of a rank-3 tensor.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary operations with a closed-form derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Abs,
    Tanh,
    Sigmoid,
    Cos,
    Sin,
    Exp,
    Ln,
    LnGamma,
    Relu,
    LeakyRelu(f64),
    Relu6,
    Silu,
    Gelu,
    Clamp(f64, f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value and derivative of a unary function at `x`.
pub fn unary_eval(op: Unary, x: f64) -> (f64, f64) {
    match op {
        Unary::Abs => (x.abs(), if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
        Unary::Tanh => {
            let t = x.tanh();
            (t, 1.0 - t * t)
        }
        Unary::Sigmoid => {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        }
        Unary::Cos => (x.cos(), -x.sin()),
        Unary::Sin => (x.sin(), x.cos()),
        Unary::Exp => {
            let e = x.exp();
            (e, e)
        }
        Unary::Ln => (x.ln(), 1.0 / x),
        Unary::LnGamma => (
            statrs::function::gamma::ln_gamma(x),
            statrs::function::gamma::digamma(x),
        ),
        Unary::Relu => {
            if x > 0.0 {
                (x, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
        Unary::LeakyRelu(a) => {
            if x > 0.0 {
                (x, 1.0)
            } else {
                (a * x, a)
            }
        }
        Unary::Relu6 => {
            if x <= 0.0 {
                (0.0, 0.0)
            } else if x >= 6.0 {
                (6.0, 0.0)
            } else {
                (x, 1.0)
            }
        }
        Unary::Silu => {
            let s = sigmoid(x);
            (x * s, s + x * s * (1.0 - s))
        }
        Unary::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        }
        Unary::Clamp(lo, hi) => {
            if x < lo {
                (lo, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Unary { input: Var, deriv: Vec<f64> },
    Prelu { input: Var, slope: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    IndexSelect { input: Var, indices: Vec<usize> },
    ExpandLast {
        input: Var,
        dx: Vec<f64>,
        param: Option<(Var, Vec<f64>)>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics computed by a training-mode batch-norm, for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Execution record of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `n` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n])
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 || (a.len() >= b.len() && a.ends_with(b)) {
        return Ok(a.to_vec());
    }
    if na == 1 || (b.len() >= a.len() && b.ends_with(a)) {
        return Ok(b.to_vec());
    }
    shape_err(format!("cannot broadcast {a:?} with {b:?}"))
}

impl Tape {
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite input tensor".into()));
        }
        self.push(t, Op::Leaf, requires_grad, "leaf")
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(&ta.shape, &tb.shape)
            .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        let n: usize = shape.iter().product();
        let (la, lb) = (ta.data.len(), tb.data.len());
        let data = (0..n).map(|i| f(ta.data[i % la], tb.data[i % lb])).collect();
        Ok((Tensor { shape, data }, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c))?;
        self.add(a, k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return shape_err(format!("matmul: {:?} x {:?}", ta.shape, tb.shape));
        }
        let (m, kk, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data[i * kk..(i + 1) * kk];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return shape_err(format!("transpose expects rank 2, got {:?}", ta.shape));
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return shape_err(format!("reshape {:?} -> {shape:?}", ta.shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: ta.data.clone(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return shape_err("mean of an empty tensor");
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    pub fn unary(&mut self, a: Var, op: Unary) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if matches!(op, Unary::Ln) && t.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of a non-positive value".into()));
        }
        if matches!(op, Unary::LnGamma) && t.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln_gamma of a non-positive value".into()));
        }
        let (vals, deriv): (Vec<f64>, Vec<f64>) = t.data.iter().map(|&x| unary_eval(op, x)).unzip();
        let out = Tensor {
            shape: t.shape.clone(),
            data: vals,
        };
        let rg = self.rg(a);
        self.push(out, Op::Unary { input: a, deriv }, rg, "unary")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }
    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::LnGamma)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    /// Parametric ReLU with a learnable scalar slope for negative inputs.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let s = &self.nodes[slope.0].value;
        if s.numel() != 1 {
            return shape_err("prelu slope must be a single value");
        }
        let s = s.data[0];
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| if x > 0.0 { x } else { s * x }).collect(),
        };
        let rg = self.rg(a) || self.rg(slope);
        self.push(out, Op::Prelu { input: a, slope }, rg, "prelu")
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.nodes[v.0].value.shape.clone(),
            None => return shape_err("concat of nothing"),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for v in inputs {
            let s = &self.nodes[v.0].value.shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d])
            {
                return shape_err(format!("concat: {s:?} does not match {first:?}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Selects slices along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let rows = t.shape[0];
        let inner: usize = t.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index(format!("index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape.clone();
        shape[0] = indices.len();
        let rg = self.rg(a);
        self.push(
            Tensor { shape, data },
            Op::IndexSelect {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
            "index_select",
        )
    }

    /// Maps every element `x` of `a` to `k` outputs `f(x, j)`, appending a
    /// trailing axis of length `k`. `f` returns value and derivative in `x`.
    pub fn expand_last(
        &mut self,
        a: Var,
        k: usize,
        f: impl Fn(f64, usize) -> (f64, f64),
    ) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = t.numel();
        let mut vals = Vec::with_capacity(n * k);
        let mut dx = Vec::with_capacity(n * k);
        for &x in &t.data {
            for j in 0..k {
                let (v, d) = f(x, j);
                vals.push(v);
                dx.push(d);
            }
        }
        let mut shape = t.shape.clone();
        shape.push(k);
        let rg = self.rg(a);
        self.push(
            Tensor { shape, data: vals },
            Op::ExpandLast {
                input: a,
                dx,
                param: None,
            },
            rg,
            "expand_last",
        )
    }

    /// Like [`Tape::expand_last`] with an extra scalar parameter `p`;
    /// `f(x, j, p)` returns value, derivative in `x` and derivative in `p`.
    pub fn expand_last_param(
        &mut self,
        a: Var,
        param: Var,
        k: usize,
        f: impl Fn(f64, usize, f64) -> (f64, f64, f64),
    ) -> Result<Var> {
        let p = &self.nodes[param.0].value;
        if p.numel() != 1 {
            return shape_err("expand_last_param: parameter must be a single value");
        }
        let p = p.data[0];
        let t = &self.nodes[a.0].value;
        let n = t.numel();
        let mut vals = Vec::with_capacity(n * k);
        let mut dx = Vec::with_capacity(n * k);
        let mut dp = Vec::with_capacity(n * k);
        for &x in &t.data {
            for j in 0..k {
                let (v, d, e) = f(x, j, p);
                vals.push(v);
                dx.push(d);
                dp.push(e);
            }
        }
        let mut shape = t.shape.clone();
        shape.push(k);
        let rg = self.rg(a) || self.rg(param);
        self.push(
            Tensor { shape, data: vals },
            Op::ExpandLast {
                input: a,
                dx,
                param: Some((param, dp)),
            },
            rg,
            "expand_last",
        )
    }

    /// Batch normalization over axis 0 of a `[batch, features]` input with
    /// learnable per-feature scale and shift.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return shape_err(format!("batch_norm expects [batch, features], got {:?}", t.shape));
        }
        let (b, d) = (t.shape[0], t.shape[1]);
        if b == 0 {
            return shape_err("batch_norm on an empty batch");
        }
        let (g, be) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if g.shape != [d] || be.shape != [d] {
            return shape_err(format!("batch_norm affine shapes {:?}/{:?} for {d} features", g.shape, be.shape));
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return shape_err("batch_norm running statistics have the wrong length");
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; d];
                for row in t.data.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; d];
                for row in t.data.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                let s = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(s))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (t.data[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g.data[j] * h + be.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = running.is_none();
        let v = self.push(
            Tensor {
                shape: vec![b, d],
                data: out,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Mean negative log-softmax of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape.len() != 2 || t.shape[0] != labels.len() {
            return shape_err(format!(
                "cross_entropy: logits {:?} with {} labels",
                t.shape,
                labels.len()
            ));
        }
        let (b, c) = (t.shape[0], t.shape[1]);
        if b == 0 {
            return shape_err("cross_entropy on an empty batch");
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Data(format!("label {y} out of range for {c} classes")));
            }
            let row = &t.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[y];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Unit-variance Gaussian negative log-likelihood without the constant:
    /// `0.5 * sum_j (pred - target)^2`, averaged over the leading (batch) axis.
    pub fn gaussian_nll(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (
            self.nodes[pred.0].value.shape.clone(),
            self.nodes[target.0].value.shape.clone(),
        );
        if sp != st {
            return shape_err(format!("gaussian_nll: {sp:?} vs {st:?}"));
        }
        let batch = sp.first().copied().unwrap_or(1).max(1);
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq)?;
        self.scale(s, 0.5 / batch as f64)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = &self.nodes[root.0].value;
        if rt.numel() != 1 {
            return shape_err(format!("backward root must be scalar, got shape {:?}", rt.shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accum(grads, *a, |ga| {
                    let la = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % la] += gi;
                    }
                });
                self.accum(grads, *b, |gb| {
                    let lb = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % lb] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let (la, lb) = (va.len(), vb.len());
                self.accum(grads, *a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % la] += gi * vb[i % lb];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % lb] += gi * va[i % la];
                    }
                });
            }
            Op::Scale(a, c) => self.accum(grads, *a, |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, kk, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G B^T, dB = A^T G
                self.accum(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            ga[i * kk + p] += s;
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..kk {
                            let av = ta.data[i * kk + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[1], out.shape[0]);
                self.accum(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accum(grads, *a, |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            Op::Sum(a) => self.accum(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => self.accum(grads, *a, |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }),
            Op::Unary { input, deriv } => self.accum(grads, *input, |ga| {
                for ((x, d), gi) in ga.iter_mut().zip(deriv).zip(g) {
                    *x += d * gi;
                }
            }),
            Op::Prelu { input, slope } => {
                let xs = &self.nodes[input.0].value.data;
                let s = self.nodes[slope.0].value.data[0];
                self.accum(grads, *input, |ga| {
                    for ((x, &xv), gi) in ga.iter_mut().zip(xs).zip(g) {
                        *x += if xv > 0.0 { *gi } else { s * gi };
                    }
                });
                self.accum(grads, *slope, |gs| {
                    gs[0] += xs.iter().zip(g).filter(|(x, _)| **x <= 0.0).map(|(x, gi)| x * gi).sum::<f64>();
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = &out.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_chunk = shape[*axis] * inner;
                let mut start = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].value.shape[*axis] * inner;
                    self.accum(grads, *v, |gv| {
                        for o in 0..outer {
                            for c in 0..chunk {
                                gv[o * chunk + c] += g[o * total_chunk + start + c];
                            }
                        }
                    });
                    start += chunk;
                }
            }
            Op::IndexSelect { input, indices } => {
                let inner: usize = out.shape[1..].iter().product();
                self.accum(grads, *input, |ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..inner {
                            ga[i * inner + c] += g[r * inner + c];
                        }
                    }
                });
            }
            Op::ExpandLast { input, dx, param } => {
                let k = *out.shape.last().unwrap();
                self.accum(grads, *input, |ga| {
                    for (e, x) in ga.iter_mut().enumerate() {
                        let base = e * k;
                        let mut s = 0.0;
                        for j in 0..k {
                            s += g[base + j] * dx[base + j];
                        }
                        *x += s;
                    }
                });
                if let Some((p, dp)) = param {
                    self.accum(grads, *p, |gp| {
                        gp[0] += g.iter().zip(dp).map(|(a, b)| a * b).sum::<f64>();
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, d) = (out.shape[0], out.shape[1]);
                let gm = &self.nodes[gamma.0].value.data;
                self.accum(grads, *beta, |gb| {
                    for i in 0..b {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
                self.accum(grads, *gamma, |gg| {
                    for i in 0..b {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    if *batch_stats {
                        let mut sum_dh = vec![0.0; d];
                        let mut sum_dh_h = vec![0.0; d];
                        for i in 0..b {
                            for j in 0..d {
                                let dh = g[i * d + j] * gm[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * xhat[i * d + j];
                            }
                        }
                        let bf = b as f64;
                        for i in 0..b {
                            for j in 0..d {
                                let dh = g[i * d + j] * gm[j];
                                gx[i * d + j] += inv_std[j] / bf
                                    * (bf * dh - sum_dh[j] - xhat[i * d + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for i in 0..b {
                            for j in 0..d {
                                gx[i * d + j] += g[i * d + j] * gm[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let c = self.nodes[logits.0].value.shape[1];
                let b = labels.len() as f64;
                self.accum(grads, *logits, |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[0] * (probs[i * c + j] - t) / b;
                        }
                    }
                });
            }
        }
    }
}
