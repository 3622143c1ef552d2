//! Reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! A [`GradTape`] records every primitive applied to its variables in
//! execution order, so the node list is topologically sorted by
//! construction and the tape is acyclic. [`GradTape::backward`] replays
//! the list in reverse and accumulates vector-Jacobian products into the
//! nodes that (transitively) depend on a leaf marked as trainable.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Default cap on flattened input and output sizes for materialized Jacobians.
pub const DEFAULT_JACOBIAN_CAP: usize = 4096;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation identifiers.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    CausalSoftmax(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    RowSelect { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Scale(Var, f64),
    Sum(Var),
    RowCosineDistance(Var, Var),
    MeanSquaredRowDistance(Var, Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitives in execution order. Constants may be borrowed for
/// the tape's lifetime `'a` instead of copied.
#[derive(Default)]
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients for every node that depends on a trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for leaves that were not marked trainable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Borrowed constant input.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Trainable input: [`GradTape::backward`] reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes.get(v.0).map(|n| n.value.as_ref()).ok_or(Error::NotOnTape)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = self.grad_flag(inputs);
        Ok(self.push(Cow::Owned(value), op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        self.record(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.add(self.check(b)?)?;
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.sub(self.check(b)?)?;
        self.record(out, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.mul(self.check(b)?)?;
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(sigmoid);
        self.record(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// `x ⊙ σ(x)`, composed from the sigmoid and product primitives.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.rank() != 2 || xv.shape()[0] > xv.shape()[1] {
            return Err(shape_err(
                "causal_softmax",
                format!("need L×M with L ≤ M, got {:?}", xv.shape()),
            ));
        }
        let out = causal_softmax_value(xv);
        self.record(out, Op::CausalSoftmax(x), &[x], "causal_softmax")
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xv = self.check(x)?;
        let gv = self.check(gain)?;
        let d = xv.cols();
        if gv.len() != d {
            return Err(shape_err(
                "rms_norm",
                format!("gain length {} vs width {d}", gv.len()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let inv = inv_rms(row, eps);
            for (o, g) in row.iter_mut().zip(gv.data()) {
                *o *= inv * g;
            }
        }
        self.record(out, Op::RmsNorm { x, gain, eps }, &[x, gain], "rms_norm")
    }

    /// Gathers rows of a table.
    pub fn row_select(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.check(table)?;
        let (n, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { id, vocab: n });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        self.record(
            out,
            Op::RowSelect {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "row_select",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(x)?.reshape(shape)?;
        self.record(out, Op::Reshape(x), &[x], "reshape")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.scale(c);
        self.record(out, Op::Scale(x, c), &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(x)?.sum());
        self.record(out, Op::Sum(x), &[x], "sum")
    }

    /// Mean over rows of `1 − cos(a_i, b_i)`. A zero-norm row contributes
    /// distance 1 and no gradient.
    pub fn row_cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "row_cosine_distance",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::scalar(row_cosine_distance_value(av, bv));
        self.record(out, Op::RowCosineDistance(a, b), &[a, b], "row_cosine_distance")
    }

    /// Mean over rows of `‖a_i − b_i‖²`.
    pub fn mean_squared_row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let diff = av.sub(bv)?;
        let out = Tensor::scalar(diff.dot(&diff) / av.rows() as f64);
        self.record(
            out,
            Op::MeanSquaredRowDistance(a, b),
            &[a, b],
            "mean_squared_row_distance",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.transpose()?;
        self.record(out, Op::Transpose(x), &[x], "transpose")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.check(x)?;
        let (r, c) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || start + len > c {
            return Err(shape_err(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        self.record(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.check(*parts.first().ok_or(Error::Empty("concat_cols"))?)?;
        let r = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.check(p)?;
            if pv.rank() != 2 || pv.rows() != r {
                return Err(shape_err("concat_cols", format!("part shape {:?}", pv.shape())));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        self.record(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Mean next-token cross-entropy of `logits` (L×V) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.check(logits)?;
        if lv.rows() != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows vs {} targets", lv.rows(), targets.len()),
            ));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            if t >= row.len() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: row.len(),
                });
            }
            total += log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        self.record(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Gradients of a scalar output with respect to every trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let ov = self.check(output)?;
        if ov.len() != 1 {
            return Err(Error::NotScalar(ov.shape().to_vec()));
        }
        self.backward_with_seed(output, Tensor::full(ov.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`).
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let ov = self.check(output)?;
        if ov.shape() != seed.shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), ov.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bv)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, av.t_matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(node.value.as_ref(), "sigmoid", |g, s| g * s * (1.0 - s))?;
                self.accumulate(grads, *x, dx);
            }
            Op::CausalSoftmax(x) => {
                let y = node.value.as_ref();
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (&y.row(i)[..=i], &g.row(i)[..=i]);
                    let s = dot(yr, gr);
                    for (j, d) in dx.row_mut(i)[..=i].iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = vec![0.0; d];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let inv = inv_rms(xr, *eps);
                    let mut proj = 0.0;
                    for j in 0..d {
                        let n = xr[j] * inv;
                        dgain[j] += gr[j] * n;
                        proj += gr[j] * gv.data()[j] * n;
                    }
                    proj /= d as f64;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let n = xr[j] * inv;
                        *o = (gr[j] * gv.data()[j] - n * proj) * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
                if self.wants(*gain) {
                    let shape = gv.shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(shape, dgain)?);
                }
            }
            Op::RowSelect { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::RowCosineDistance(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rows = av.rows();
                let scale = g.item() / rows as f64;
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for r in 0..rows {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let (aa, bb, ab) = (dot(ar, ar), dot(br, br), dot(ar, br));
                    if aa == 0.0 || bb == 0.0 {
                        continue;
                    }
                    let denom = (aa * bb).sqrt();
                    let cos = ab / denom;
                    for (j, o) in da.row_mut(r).iter_mut().enumerate() {
                        *o = -scale * (br[j] / denom - cos * ar[j] / aa);
                    }
                    for (j, o) in db.row_mut(r).iter_mut().enumerate() {
                        *o = -scale * (ar[j] / denom - cos * br[j] / bb);
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MeanSquaredRowDistance(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.item() / av.rows() as f64;
                let da = av.zip_map(bv, "msrd", |x, y| c * (x - y))?;
                self.accumulate(grads, *b, da.scale(-1.0));
                self.accumulate(grads, *a, da);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(pv.rows(), w, dp)?);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let scale = g.item() / targets.len() as f64;
                let mut dl = Tensor::zeros(lv.shape());
                for (i, &t) in targets.iter().enumerate() {
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    for (j, o) in dl.row_mut(i).iter_mut().enumerate() {
                        *o = scale * ((row[j] - lse).exp() - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

pub(crate) fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = dot(row, row) / row.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        1.0 / denom
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn causal_softmax_value(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let row = &x.row(i)[..=i];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out.row_mut(i)[..=i];
        let mut z = 0.0;
        for (o, v) in o.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in o.iter_mut() {
            *o /= z;
        }
    }
    out
}

pub(crate) fn row_cosine_distance_value(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.rows();
    let mut total = 0.0;
    for r in 0..rows {
        total += row_cosine_distance_single(a.row(r), b.row(r));
    }
    total / rows as f64
}

/// `1 − cos(a, b)` clamped to `[0, 2]`; 1 when either vector is zero.
pub(crate) fn row_cosine_distance_single(a: &[f64], b: &[f64]) -> f64 {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return 1.0;
    }
    // sqrt(aa·bb) rather than sqrt(aa)·sqrt(bb): identical rows give exactly 0.
    (1.0 - dot(a, b) / (aa * bb).sqrt()).clamp(0.0, 2.0)
}

/// Materialized Jacobian of `f` at `z`.
///
/// Uses the row-vector convention `δ ≈ Δ·J`: for flattened input size `n`
/// and output size `m` the result is `n × m` with `J[i][k] = ∂y_k / ∂z_i`.
/// One reverse sweep is run per output coordinate.
pub fn jacobian<'a, F>(f: F, z: &Tensor, cap: usize) -> Result<Tensor>
where
    F: Fn(&mut GradTape<'a>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let zv = tape.leaf(z.clone());
    let y = f(&mut tape, zv)?;
    let m = tape.value(y).len();
    jacobian_columns(&tape, zv, y, &(0..m).collect::<Vec<_>>(), cap)
}

/// Columns of the Jacobian for the selected output coordinates only
/// (`n × outputs.len()`), from a tape already holding the forward pass.
pub fn jacobian_columns(
    tape: &GradTape<'_>,
    input: Var,
    output: Var,
    outputs: &[usize],
    cap: usize,
) -> Result<Tensor> {
    let n = tape.check(input)?.len();
    let oshape = tape.check(output)?.shape().to_vec();
    let m: usize = oshape.iter().product();
    for dim in [n, m] {
        if dim > cap {
            return Err(Error::DimensionCap { dim, cap });
        }
    }
    let k = outputs.len();
    let mut jac = vec![0.0; n * k];
    for (col, &o) in outputs.iter().enumerate() {
        if o >= m {
            return Err(Error::InvalidArgument(format!("output index {o} >= {m}")));
        }
        let mut seed = Tensor::zeros(&oshape);
        seed.data_mut()[o] = 1.0;
        let mut grads = tape.backward_with_seed(output, seed)?;
        if let Some(g) = grads.take(input) {
            for (i, v) in g.data().iter().enumerate() {
                jac[i * k + col] = *v;
            }
        }
    }
    Tensor::matrix(n, k, jac)?.ensure_finite("jacobian")
}
