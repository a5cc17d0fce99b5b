//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op appends a node after its inputs, so node order is a topological
//! order and `backward` is a single reverse sweep. Gradients accumulate
//! (add) across fan-out.

use rand::Rng;

use super::{NnError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    /// `rhs` broadcasts over the leading axes of `lhs`.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    /// Cache holds `xhat` followed by per-row `1/std`.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Gelu(Var),
    Tanh(Var),
    /// Cache holds the softmax probabilities.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<u32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    cache: Vec<f64>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.044715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Computation tape. Values live on the tape; [`Var`]s index into it.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Non-finite checks default to on in debug builds and off in release.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects a
    /// gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            cache: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = true;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by [`Tape::backward`], if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
        cache: Vec<f64>,
    ) -> Result<Var, NnError> {
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let mut value = Tensor::from_parts(shape, data);
        value.requires_grad = requires_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, cache });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NnError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref other => Err(NnError::Rank {
                op,
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(NnError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul(a, b),
            &[a, b],
            Vec::new(),
        )
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape,
    /// in which case it is broadcast (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NnError::Shape {
                op: "add",
                lhs: sa,
                rhs: sb.to_vec(),
            });
        }
        let bd = self.value(b).data();
        let period = bd.len().max(1);
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % period])
            .collect();
        self.push("add", sa, out, Op::Add(a, b), &[a, b], Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b), &[a, b], Vec::new())
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NnError> {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, factor), &[x], Vec::new())
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(
            "transpose",
            vec![c, r],
            out,
            Op::Transpose(x),
            &[x],
            Vec::new(),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NnError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).data().to_vec();
        self.push(
            "reshape",
            shape.to_vec(),
            out,
            Op::Reshape(x),
            &[x],
            Vec::new(),
        )
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), NnError> {
        if axis >= self.shape(x).len() {
            return Err(NnError::Axis {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NnError> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = axis_extents(&shape, axis);
        if start + len > full {
            return Err(NnError::Index {
                op: "slice",
                index: start + len,
                bound: full,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "slice",
            out_shape,
            out,
            Op::Slice { x, axis, start },
            &[x],
            Vec::new(),
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = *inputs.first().ok_or(NnError::Empty { op: "concat" })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NnError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", shape, out, op, inputs, Vec::new())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x), &[x], Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NnError::Empty { op: "mean" });
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", vec![], vec![m], Op::Mean(x), &[x], Vec::new())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x).data(), &shape, axis);
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax { x, axis },
            &[x],
            Vec::new(),
        )
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(NnError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(NnError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / d.max(1);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        xhat.extend_from_slice(&inv_std);
        let op = Op::LayerNorm { x, gamma, beta };
        self.push("layer_norm", shape, out, op, &[x, gamma, beta], xhat)
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| gelu_scalar(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), &[x], Vec::new())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push("tanh", shape, out, Op::Tanh(x), &[x], Vec::new())
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (batch, classes) = self.dims2("cross_entropy", logits)?;
        if batch != labels.len() || batch == 0 {
            return Err(NnError::Shape {
                op: "cross_entropy",
                lhs: vec![batch, classes],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Index {
                op: "cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let probs = softmax_along(self.value(logits).data(), &[batch, classes], 1);
        let data = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= batch as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        };
        self.push("cross_entropy", vec![], vec![loss], op, &[logits], probs)
    }

    /// Selects rows of a 2-D `table` by id (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var, NnError> {
        let (rows, cols) = self.dims2("gather_rows", table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let i = id as usize;
            if i >= rows {
                return Err(NnError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(
            "gather_rows",
            vec![ids.len(), cols],
            out,
            op,
            &[table],
            Vec::new(),
        )
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1/(1-rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, NnError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires grad carries its gradient in `Tensor::grad`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            let mut contribs: Vec<(Var, Vec<f64>)> = Vec::new();
            self.local_grads(node, &g, &mut contribs);
            for (v, c) in contribs {
                if !self.needs_grad(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[idx].value.grad = Some(g);
            }
        }
        for node in &mut self.nodes[..n] {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &[f64], out: &mut Vec<(Var, Vec<f64>)>) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                if self.needs_grad(a) {
                    let mut ga = vec![0.0; m * k];
                    mm_nt_acc(g, val(b), &mut ga, m, n, k);
                    out.push((a, ga));
                }
                if self.needs_grad(b) {
                    let mut gb = vec![0.0; k * n];
                    mm_tn_acc(val(a), g, &mut gb, m, k, n);
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                if self.needs_grad(b) {
                    let period = val(b).len().max(1);
                    let mut gb = vec![0.0; val(b).len()];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % period] += gv;
                    }
                    out.push((b, gb));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                out.push((a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                out.push((b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
            }
            &Op::Scale(x, f) => out.push((x, g.iter().map(|v| v * f).collect())),
            &Op::Transpose(x) => {
                let (r, c) = (shape(x)[0], shape(x)[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                out.push((x, gx));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            &Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_extents(shape(x), axis);
                let len = node.value.shape()[axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out.push((x, gx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((v, gv));
                }
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; val(x).len()])),
            &Op::Mean(x) => {
                let n = val(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((x, gx));
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let d = *node.value.shape().last().unwrap();
                let total = node.value.len();
                let rows = total / d;
                let (xhat, inv_std) = node.cache.split_at(total);
                let gam = val(gamma);
                let mut gx = vec![0.0; total];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                out.push((x, gx));
                out.push((gamma, gg));
                out.push((beta, gbeta));
            }
            &Op::Gelu(x) => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect(),
            )),
            &Op::Tanh(x) => out.push((
                x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
            )),
            Op::CrossEntropy { logits, labels } => {
                let batch = labels.len();
                let classes = shape(*logits)[1];
                let scale = g[0] / batch as f64;
                let mut gl: Vec<f64> = node.cache.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] -= scale;
                }
                out.push((*logits, gl));
            }
            Op::GatherRows { table, ids } => {
                let cols = shape(*table)[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * cols..(id as usize + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += s;
                    }
                }
                out.push((*table, gt));
            }
        }
    }
}

/// `exp(x - max) / Σ exp(x - max)` along `axis` of a row-major buffer.
pub fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    out
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), tape.value(a).data());

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
        match err {
            NnError::Shape { lhs, rhs, .. } => assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3])),
            other => panic!("{other}"),
        }
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.mul(a, c).is_err());
        assert!(tape.add(c, a).is_err());
        assert!(tape.reshape(a, &[4]).is_err());
        assert!(tape.slice(a, 1, 2, 2).is_err());
        assert!(tape.softmax(a, 2).is_err());
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        for (input, expected) in [
            (vec![0.0, 0.0], vec![0.5, 0.5]),
            (vec![1000.0, 1000.0], vec![0.5, 0.5]),
            (vec![1.0, 2.0, 3.0], vec![0.0900, 0.2447, 0.6652]),
        ] {
            let x = tape.constant(t(&[input.len()], &input));
            let y = tape.softmax(x, 0).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(&expected) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_values() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b0 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b0, 1e-12).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.0, epsilon = 1e-6);

        let c = tape.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, g, b0, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let beta = tape.constant(t(&[2], &[0.5, -3.0]));
        let shifted = tape.layer_norm(x, g, beta, 1e-12).unwrap();
        let base = tape.layer_norm(x, g, b0, 1e-12).unwrap();
        for j in 0..2 {
            let want = tape.value(base).data()[j] + [0.5, -3.0][j];
            assert_abs_diff_eq!(tape.value(shifted).data()[j], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_abs_diff_eq!(gelu_scalar(10.0), 10.0, epsilon = 1e-6);
        for x in [-2.0, -0.5, 0.5, 2.0] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad_scalar(x), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[2, 3]));
        let l = tape.cross_entropy(u, &[0, 2]).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], 3f64.ln(), epsilon = 1e-12);

        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], 0.4076, epsilon = 1e-4);

        let conf = tape.constant(t(&[1, 3], &[0.0, 0.0, 200.0]));
        let l = tape.cross_entropy(conf, &[2]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-80);

        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(NnError::Index {
                index: 3,
                bound: 3,
                ..
            })
        ));
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let a_val = t(&[2, 3], &[0.3, -1.0, 2.0, 0.7, 0.1, -0.4]);
        let b_val = t(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -1.5]);
        let mut tape = Tape::new();
        let a = tape.param(a_val.clone());
        let b = tape.constant(b_val.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let got = tape.grad(a).unwrap().to_vec();

        // ones[2×2] · Bᵀ
        for i in 0..2 {
            for p in 0..3 {
                let want = b_val.row(p).iter().sum::<f64>();
                assert_abs_diff_eq!(got[i * 3 + p], want, epsilon = 1e-12);
            }
        }
        // central differences, h = 1e-5
        let f = |a: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let a = tape.constant(a.clone());
            let b = tape.constant(b_val.clone());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sum(c).unwrap();
            tape.value(s).data()[0]
        };
        let h = 1e-5;
        for j in 0..6 {
            let mut plus = a_val.clone();
            plus.data_mut()[j] += h;
            let mut minus = a_val.clone();
            minus.data_mut()[j] -= h;
            assert_abs_diff_eq!(got[j], (f(&plus) - f(&minus)) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.scale(x, 3.0).unwrap();
        let w = tape.add(y, z).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.add(a, a).unwrap();
        assert!(!tape.value(b).requires_grad);
        let p = tape.param(Tensor::ones(&[2]));
        let c = tape.mul(b, p).unwrap();
        assert!(tape.value(c).requires_grad);
    }

    #[test]
    fn finite_check_flags_overflow() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(Tensor::filled(&[1], 1e300));
        assert!(matches!(
            tape.scale(x, 1e300),
            Err(NnError::NonFinite { op: "scale" })
        ));
        let mut tape = Tape::new().with_finite_checks(false);
        let x = tape.constant(Tensor::filled(&[1], 1e300));
        assert!(tape.scale(x, 1e300).is_ok());
    }

    #[test]
    fn gather_rows_checks_bounds() {
        let mut tape = Tape::new();
        let table = tape.param(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let rows = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = tape.sum(rows).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            tape.gather_rows(table, &[3]),
            Err(NnError::Index { .. })
        ));
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let a = tape.slice(x, 1, 0, 1).unwrap();
        let b = tape.slice(x, 1, 1, 3).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let r = tape.slice(x, 0, 1, 1).unwrap();
        assert_eq!(tape.value(r).data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = rand::rng();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[4]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
