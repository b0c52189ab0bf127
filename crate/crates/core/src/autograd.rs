//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the indices of its parents. [`Tape::backward`] walks the
//! nodes in reverse and accumulates parameter gradients into a [`GradStore`].
//! Parameters enter the tape by reference, so building a tape per sample does
//! not copy model weights.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Scale(usize, T),
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: Vec<(T, T)> },
    Gelu(usize),
    Softmax(usize),
    Suppress(usize, Vec<usize>),
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    AddIndexedRows { x: usize, table: usize, index: Vec<usize> },
    ScatterRows { src: usize, fill: usize, positions: Vec<usize> },
    GatherRows { src: usize, rows: Vec<usize> },
    MaskedMse { pred: usize, target: Tensor<T>, rows: Vec<usize> },
    Sum(usize),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter accumulated gradients, indexed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn new() -> Self {
        Self { grads: Vec::new() }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, id: usize, grad: &Tensor<T>) {
        if self.grads.len() <= id {
            self.grads.resize_with(id + 1, || None);
        }
        match &mut self.grads[id] {
            Some(g) => g.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &GradStore<T>) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A learnable leaf; its gradient lands in the [`GradStore`] under `id`.
    pub fn param(&mut self, value: &'a Tensor<T>, id: usize) -> Var {
        self.push_unchecked(Cow::Borrowed(value), Op::Param(id), true)
    }

    /// Like [`Tape::param`] but takes ownership of the value.
    pub fn param_owned(&mut self, value: Tensor<T>, id: usize) -> Var {
        self.push_unchecked(Cow::Owned(value), Op::Param(id), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Cow::Owned(value), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_unchecked(Cow::Borrowed(value), Op::Constant, false)
    }

    fn push_unchecked(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push_unchecked(Cow::Owned(value), op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.push(out, Op::MatMulNt(a.0, b.0), &[a.0, b.0], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::rejected(format!("add shapes differ: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::rejected(format!("mul shapes differ: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0], "mul")
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, cols) = vx.matrix_dims("add_row_bias")?;
        if vb.len() != cols {
            return Err(Error::rejected(format!("bias of length {} for {cols} columns", vb.len())));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRowBias(x.0, bias.0), &[x.0, bias.0], "add_row_bias")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x.0, s), &[x.0], "scale")
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.matrix_dims("layer_norm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::rejected("layer_norm gain/bias length mismatch"));
        }
        let eps = T::c(LAYER_NORM_EPS);
        let inv_n = T::one() / T::c(cols as f64);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = (row[c] - mean) * rstd * g.data()[c] + b.data()[c];
            }
            stats.push((mean, rstd));
        }
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats }, &[x.0, gamma.0, beta.0], "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::c(GELU_C), T::c(GELU_A));
        let half = T::c(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + fast_tanh(c * (v + a * v * v * v))));
        self.push(out, Op::Gelu(x.0), &[x.0], "gelu")
    }

    /// Row softmax; `-inf` entries receive exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.value(x))?;
        self.push(out, Op::Softmax(x.0), &[x.0], "softmax_rows")
    }

    /// Replaces the entries at the given flat indices with `-inf`.
    pub fn suppress(&mut self, x: Var, flat_indices: Vec<usize>) -> Result<Var> {
        let mut out = self.value(x).clone();
        for &i in &flat_indices {
            if i >= out.len() {
                return Err(Error::rejected(format!("suppress index {i} out of range {}", out.len())));
            }
            out.data_mut()[i] = T::neg_infinity();
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push_unchecked(Cow::Owned(out), Op::Suppress(x.0, flat_indices), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, width)?;
        self.push(out, Op::SliceCols { src: x.0, start }, &[x.0], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::rejected("concat of nothing"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).matrix_dims("concat_cols")?;
            if r != rows {
                return Err(Error::rejected("concat_cols row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_rows(rows, total, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatCols(ids.clone()), &ids, "concat_cols")
    }

    /// `out[r] = x[r] + table[index[r]]`.
    pub fn add_indexed_rows(&mut self, x: Var, table: Var, index: Vec<usize>) -> Result<Var> {
        let (vx, vt) = (self.value(x), self.value(table));
        let (rows, cols) = vx.matrix_dims("add_indexed_rows")?;
        if vt.cols() != cols || index.len() != rows || index.iter().any(|&i| i >= vt.rows()) {
            return Err(Error::rejected("add_indexed_rows table/index mismatch"));
        }
        let mut out = vx.clone();
        for (r, &i) in index.iter().enumerate() {
            for (o, &t) in out.row_mut(r).iter_mut().zip(vt.row(i)) {
                *o = *o + t;
            }
        }
        self.push(out, Op::AddIndexedRows { x: x.0, table: table.0, index }, &[x.0, table.0], "add_indexed_rows")
    }

    /// Builds a `total_rows`-row matrix with `src[r]` at `positions[r]` and the
    /// `fill` row everywhere else.
    pub fn scatter_rows(&mut self, src: Var, fill: Var, positions: Vec<usize>, total_rows: usize) -> Result<Var> {
        let (vs, vf) = (self.value(src), self.value(fill));
        let cols = vs.cols();
        if vf.len() != cols || positions.len() != vs.rows() {
            return Err(Error::rejected("scatter_rows fill/positions mismatch"));
        }
        let mut out = Tensor::zeros(&[total_rows, cols]);
        let mut taken = vec![false; total_rows];
        for (r, &p) in positions.iter().enumerate() {
            if p >= total_rows || taken[p] {
                return Err(Error::rejected(format!("scatter position {p} invalid or repeated")));
            }
            taken[p] = true;
            out.row_mut(p).copy_from_slice(vs.row(r));
        }
        for (p, t) in taken.iter().enumerate() {
            if !t {
                out.row_mut(p).copy_from_slice(vf.data());
            }
        }
        self.push(out, Op::ScatterRows { src: src.0, fill: fill.0, positions }, &[src.0, fill.0], "scatter_rows")
    }

    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let out = self.value(src).gather_rows(&rows)?;
        self.push(out, Op::GatherRows { src: src.0, rows }, &[src.0], "gather_rows")
    }

    /// Mean squared error between `pred[rows[r]]` and `target[r]`, averaged
    /// over the selected rows and all columns.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor<T>, rows: Vec<usize>) -> Result<Var> {
        let vp = self.value(pred);
        let cols = vp.cols();
        if rows.is_empty() {
            return Err(Error::rejected("masked_mse over an empty row set"));
        }
        if target.rows() != rows.len() || target.cols() != cols || rows.iter().any(|&r| r >= vp.rows()) {
            return Err(Error::rejected("masked_mse target/rows mismatch"));
        }
        let mut total = T::zero();
        for (i, &r) in rows.iter().enumerate() {
            for (&p, &t) in vp.row(r).iter().zip(target.row(i)) {
                total = total + (p - t) * (p - t);
            }
        }
        let loss = total / T::c((rows.len() * cols) as f64);
        self.push(Tensor::scalar(loss), Op::MaskedMse { pred: pred.0, target, rows }, &[pred.0], "masked_mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0], "sum")
    }

    /// Propagates d(loss)/d(node) back to every parameter and adds the result
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut GradStore<T>) -> Result<()> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::rejected(format!("backward needs a scalar loss, got shape {:?}", root.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: usize) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let shape = self.nodes[id].value.shape();
        Some(grads[id].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(
        &self,
        node: &Node<'a, T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut GradStore<T>,
    ) -> Result<()> {
        let val = |i: usize| -> &Tensor<T> { &self.nodes[i].value };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if let Some(da) = self.slot(grads, *a) {
                    // dA += dC · Bᵀ
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, val(*b).data(), 1, n as isize, T::one(), da.data_mut(), k as isize, 1);
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB += Aᵀ · dC
                    T::gemm(k, m, n, T::one(), val(*a).data(), 1, k as isize, g.data(), n as isize, 1, T::one(), db.data_mut(), n as isize, 1);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if let Some(da) = self.slot(grads, *a) {
                    // dA += dC · B
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, val(*b).data(), k as isize, 1, T::one(), da.data_mut(), k as isize, 1);
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB += dCᵀ · A
                    T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, val(*a).data(), k as isize, 1, T::one(), db.data_mut(), k as isize, 1);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(d) = self.slot(grads, *p) {
                        d.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(g.data()).zip(val(*b).data()) {
                        *d = *d + gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &av) in db.data_mut().iter_mut().zip(g.data()).zip(val(*a).data()) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.add_assign(g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let cols = g.cols();
                    for row in g.data().chunks(cols) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &v) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + v * *s;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let vx = val(*x);
                let vg = val(*gamma);
                let cols = vx.cols();
                let inv_n = T::one() / T::c(cols as f64);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for ((d, &gv), &xv) in dg.data_mut().iter_mut().zip(g.row(r)).zip(vx.row(r)) {
                            *d = *d + gv * (xv - mean) * rstd;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for r in 0..stats.len() {
                        for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d = *d + gv;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let (xr, gr) = (vx.row(r), g.row(r));
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            dxhat[c] = gr[c] * vg.data()[c];
                            let xhat = (xr[c] - mean) * rstd;
                            mean_d = mean_d + dxhat[c];
                            mean_dx = mean_dx + dxhat[c] * xhat;
                        }
                        mean_d = mean_d * inv_n;
                        mean_dx = mean_dx * inv_n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let xhat = (xr[c] - mean) * rstd;
                            out[c] = out[c] + rstd * (dxhat[c] - mean_d - xhat * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (c, a) = (T::c(GELU_C), T::c(GELU_A));
                    let half = T::c(0.5);
                    let three_a = T::c(3.0 * GELU_A);
                    for ((d, &gv), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(val(*x).data()) {
                        let t = fast_tanh(c * (v + a * v * v * v));
                        let dt = (T::one() - t * t) * c * (T::one() + three_a * v * v);
                        *d = *d + gv * (half * (T::one() + t) + half * v * dt);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let y = &node.value;
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for ((d, &yv), &gv) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Suppress(x, indices) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let mut pass = g.clone();
                    for &i in indices {
                        pass.data_mut()[i] = T::zero();
                    }
                    dx.add_assign(&pass);
                }
            }
            Op::SliceCols { src, start } => {
                if let Some(ds) = self.slot(grads, *src) {
                    let (w, sc) = (g.cols(), ds.cols());
                    for r in 0..g.rows() {
                        let dst = &mut ds.data_mut()[r * sc + start..r * sc + start + w];
                        for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            let src = &g.row(r)[offset..offset + w];
                            for (d, &v) in dp.row_mut(r).iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::AddIndexedRows { x, table, index } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.add_assign(g);
                }
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &i) in index.iter().enumerate() {
                        for (d, &v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::ScatterRows { src, fill, positions } => {
                if let Some(ds) = self.slot(grads, *src) {
                    for (r, &p) in positions.iter().enumerate() {
                        for (d, &v) in ds.row_mut(r).iter_mut().zip(g.row(p)) {
                            *d = *d + v;
                        }
                    }
                }
                if let Some(df) = self.slot(grads, *fill) {
                    let mut taken = vec![false; g.rows()];
                    for &p in positions {
                        taken[p] = true;
                    }
                    for (r, t) in taken.iter().enumerate() {
                        if !t {
                            for (d, &v) in df.data_mut().iter_mut().zip(g.row(r)) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                if let Some(ds) = self.slot(grads, *src) {
                    for (r, &s) in rows.iter().enumerate() {
                        for (d, &v) in ds.row_mut(s).iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                if let Some(dp) = self.slot(grads, *pred) {
                    let vp = val(*pred);
                    let cols = vp.cols();
                    let coef = T::c(2.0) * g.item() / T::c((rows.len() * cols) as f64);
                    for (i, &r) in rows.iter().enumerate() {
                        let prow = vp.row(r);
                        let trow = target.row(i);
                        let drow = dp.row_mut(r);
                        for c in 0..cols {
                            drow[c] = drow[c] + coef * (prow[c] - trow[c]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let gv = g.item();
                    for d in dx.data_mut() {
                        *d = *d + gv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `tanh` through a single `exp`, cheaper than the libm routine.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::c(2.0);
    if u.abs() < T::c(1e-3) {
        // Avoids cancellation near zero.
        return u - u * u * u / T::c(3.0);
    }
    T::one() - two / ((two * u).exp() + T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-12, "{x}");
        }
        assert_eq!(fast_tanh(100.0f32), 1.0);
        assert_eq!(fast_tanh(-100.0f32), -1.0);
    }

    #[test]
    fn square_derivative() {
        let x = Tensor::scalar(3.0f64);
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let y = tape.mul(v, v).unwrap();
        let mut store = GradStore::new();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(0).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::scalar(3.0f64);
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let y = tape.mul(v, v).unwrap();
        let mut store = GradStore::new();
        tape.backward(y, &mut store).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(0).unwrap().item(), 12.0);
        store.zero();
        assert_eq!(store.get(0).unwrap().item(), 0.0);
    }

    #[test]
    fn unreachable_parameter_has_no_gradient() {
        let x = Tensor::scalar(2.0f64);
        let unused = Tensor::scalar(5.0f64);
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let _u = tape.param(&unused, 1);
        let y = tape.mul(v, v).unwrap();
        let mut store = GradStore::new();
        tape.backward(y, &mut store).unwrap();
        assert!(store.get(1).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let mut store = GradStore::new();
        assert!(matches!(tape.backward(v, &mut store), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn suppressed_entries_get_zero_weight_and_gradient() {
        let x = Tensor::from_rows(1, 3, vec![1.0f64, 2.0, 3.0]).unwrap();
        let w = Tensor::from_rows(1, 3, vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let s = tape.suppress(v, vec![1]).unwrap();
        let p = tape.softmax_rows(s).unwrap();
        assert_eq!(tape.value(p).data()[1], 0.0);
        let wv = tape.constant_ref(&w);
        let prod = tape.mul(p, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let mut store = GradStore::new();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(0).unwrap().data()[1], 0.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let x = Tensor::from_rows(1, 1, vec![f64::MAX]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        assert!(matches!(tape.scale(v, 10.0), Err(Error::NonFinite { .. })));
    }
}
