//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the tape is always topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use graphflow::graph::Graph;
//! use graphflow::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MaskedMatMul(Var, Var, Tensor),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    ReverseLast(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MaskedMatMul(..) => "masked_matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::TransposeLast(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::ReverseLast(..) => "reverse",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MaskedMatMul(a, b, _)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::TransposeLast(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a)
            | Op::Slice(a, ..)
            | Op::Reshape(a)
            | Op::ReverseLast(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros of the given shape when unreached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Evaluation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `a[..., k] × b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.matmul_value("matmul", a, self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    /// `x[..., k] × (w ⊙ mask)[k, n]`; `mask` is a fixed 0/1 pattern.
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(w) != mask.shape() {
            return Err(Error::shape(
                "masked_matmul",
                format!("weight {:?} vs mask {:?}", self.shape(w), mask.shape()),
            ));
        }
        let masked = self.value(w).zip_map(mask, |a, m| a * m);
        let value = self.matmul_value("masked_matmul", x, &masked)?;
        self.push(value, Op::MaskedMatMul(x, w, mask.clone()))
    }

    fn matmul_value(&self, op: &'static str, a: Var, b: &Tensor) -> Result<Tensor> {
        let av = self.value(a);
        if b.ndim() != 2 || av.last_dim() != b.shape()[0] {
            return Err(Error::shape(
                op,
                format!("{:?} × {:?}", av.shape(), b.shape()),
            ));
        }
        let k = b.shape()[0];
        let n = b.shape()[1];
        let rows = av.numel() / k;
        let mut out = vec![0.0; rows * n];
        mm(av.data(), b.data(), &mut out, rows, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::new(shape, out)
    }

    /// `a[B, m, k] × b[B, k, n]` per batch item.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} × {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(value, Op::BatchMatMul(a, b))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() < 2 {
            return Err(Error::shape("transpose", format!("{:?}", av.shape())));
        }
        let value = transpose_last(av);
        self.push(value, Op::TransposeLast(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a[..., n] + b[n]`, broadcasting `b` over every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.last_dim();
        if bv.ndim() != 1 || bv.numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.last_dim();
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(value, Op::Softmax(a))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Concat(xs.to_vec(), axis))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Slice(a, axis, start))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push(value, Op::Reshape(a))
    }

    /// Reverse the order of the last axis.
    pub fn reverse_last(&mut self, a: Var) -> Result<Var> {
        let value = reverse_last(self.value(a));
        self.push(value, Op::ReverseLast(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.numel() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Sum over the last axis; a 1-D input reduces to shape `[1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.last_dim();
        let out: Vec<f64> = av.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = av.shape()[..av.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumLast(a))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let node = self.nodes.get(output.0).ok_or_else(|| {
            Error::Usage("backward called on a value that was never computed on this graph".into())
        })?;
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(node.value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(upstream);
                continue;
            }
            for (input, g) in self.local_grads(node, &upstream) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Vec<(Var, Tensor)> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = matmul_grads(av, bv, up);
                vec![(*a, da), (*b, db)]
            }
            Op::MaskedMatMul(x, w, mask) => {
                let masked = self.value(*w).zip_map(mask, |a, m| a * m);
                let (dx, dw) = matmul_grads(self.value(*x), &masked, up);
                vec![(*x, dx), (*w, dw.zip_map(mask, |g, m| g * m))]
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let ua = &up.data()[i * m * n..(i + 1) * m * n];
                    mm_nt(
                        ua,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        ua,
                        &mut db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da).unwrap()),
                    (*b, Tensor::new(bv.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::TransposeLast(a) => vec![(*a, transpose_last(up))],
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|g| -g))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, up.zip_map(bv, |g, y| g * y)),
                    (*b, up.zip_map(av, |g, x| g * x)),
                ]
            }
            Op::AddRow(a, b) => {
                let n = y.last_dim();
                let mut db = vec![0.0; n];
                for row in up.data().chunks(n) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![(*a, up.clone()), (*b, Tensor::from_vec(db))]
            }
            Op::Scale(a, c) => vec![(*a, up.map(|g| g * c))],
            Op::Exp(a) => vec![(*a, up.zip_map(y, |g, e| g * e))],
            Op::Log(a) => vec![(*a, up.zip_map(self.value(*a), |g, x| g / x))],
            Op::Tanh(a) => vec![(*a, up.zip_map(y, |g, t| g * (1.0 - t * t)))],
            Op::Sigmoid(a) => vec![(*a, up.zip_map(y, |g, s| g * s * (1.0 - s)))],
            Op::Relu(a) => vec![(
                *a,
                up.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            )],
            Op::Square(a) => vec![(*a, up.zip_map(self.value(*a), |g, x| 2.0 * x * g))],
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *a,
                    up.zip_map(
                        self.value(*a),
                        |g, x| {
                            if (lo..=hi).contains(&x) {
                                g
                            } else {
                                0.0
                            }
                        },
                    ),
                )]
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut dx = up.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, s)| g * s).sum();
                    for (d, s) in drow.iter_mut().zip(yrow) {
                        *d = s * (*d - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Concat(xs, axis) => {
                let s = y.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let xs_shape = self.shape(x);
                    let chunk = xs_shape[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + offset;
                        g.extend_from_slice(&up.data()[base..base + chunk]);
                    }
                    offset += chunk;
                    out.push((x, Tensor::new(xs_shape.to_vec(), g).unwrap()));
                }
                out
            }
            Op::Slice(a, axis, start) => {
                let src = self.shape(*a);
                let len = y.shape()[*axis];
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let mut g = Tensor::zeros(src);
                let gd = g.data_mut();
                for o in 0..outer {
                    let dst = (o * src[*axis] + start) * inner;
                    let from = o * len * inner;
                    gd[dst..dst + len * inner]
                        .copy_from_slice(&up.data()[from..from + len * inner]);
                }
                vec![(*a, g)]
            }
            Op::Reshape(a) => vec![(*a, up.reshape(self.shape(*a)).unwrap())],
            Op::ReverseLast(a) => vec![(*a, reverse_last(up))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), up.item()))],
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = self.value(*a).numel() as f64;
                vec![(*a, Tensor::full(shape, up.item() / n))]
            }
            Op::SumLast(a) => {
                let av = self.value(*a);
                let n = av.last_dim();
                let mut g = Tensor::zeros(av.shape());
                for (row, &u) in g.data_mut().chunks_mut(n).zip(up.data()) {
                    row.fill(u);
                }
                vec![(*a, g)]
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_grads(a: &Tensor, b: &Tensor, up: &Tensor) -> (Tensor, Tensor) {
    let k = b.shape()[0];
    let n = b.shape()[1];
    let rows = a.numel() / k;
    let mut da = vec![0.0; rows * k];
    let mut db = vec![0.0; k * n];
    mm_nt(up.data(), b.data(), &mut da, rows, n, k);
    mm_tn(a.data(), up.data(), &mut db, rows, k, n);
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

/// `out[m, n] += a[m, k] · b[k, n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m, k] += a[m, n] · b[k, n]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let arp = a[r * k + p];
            if arp == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += arp * bv;
            }
        }
    }
}

fn transpose_last(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (m * n);
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let len = shape.len();
    shape.swap(len - 2, len - 1);
    Tensor::new(shape, out).unwrap()
}

fn reverse_last(t: &Tensor) -> Tensor {
    let n = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(n) {
        row.reverse();
    }
    out
}
