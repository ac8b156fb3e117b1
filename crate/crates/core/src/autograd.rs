//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation in
//! execution order, and on [`Graph::backward`] walks the tape in reverse to
//! produce a [`Grads`] value. Graphs are independent, so separate samples can
//! be differentiated concurrently against one parameter snapshot.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    PadRows(Var),
    MaskRows(Var, Vec<bool>),
    Sum(Var),
    NllSum {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!("{}x{} · ({}x{})ᵀ", ta.rows(), ta.cols(), tb.rows(), tb.cols()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(false, true, m, k, n, ta.data(), tb.data(), 0.0, out.data_mut());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(
                "add",
                format!("{}x{} + {}x{}", ta.rows(), ta.cols(), tb.rows(), tb.cols()),
            ));
        }
        let out = ta.add(tb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{}x{} + row {}x{}", ta.rows(), ta.cols(), tb.rows(), tb.cols()),
            ));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape("mul", "operand shapes differ"));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_rows(ta.rows(), ta.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant (dropout masks, padding masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if !ta.same_shape(&c) {
            return Err(Error::shape("mul_const", "operand shapes differ"));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_rows(ta.rows(), ta.cols(), data);
        let ng = self.needs(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::from_rows(ta.rows(), ta.cols(), data);
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise softmax where `allowed[r * cols + c] == false` forces weight 0.
    ///
    /// A row with no allowed entry is an error.
    pub fn masked_softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if let Some(m) = allowed {
            if m.len() != rows * cols {
                return Err(Error::shape("masked_softmax", "mask size differs from logits"));
            }
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row_mask = allowed.map(|m| &m[r * cols..(r + 1) * cols]);
            softmax_row(ta.row(r), row_mask, out.row_mut(r)).map_err(|_| {
                Error::Numeric(format!("softmax row {r} has every position masked"))
            })?;
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::MaskedSoftmax(a), ng))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = (tx.rows(), tx.cols());
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::shape("layer_norm", "gain/bias width differs from input"));
        }
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.get(r, c) * tg.data()[c] + tb.data()[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let cols = tt.cols();
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= tt.rows() {
                return Err(Error::Data(format!(
                    "id {id} out of range for table with {} rows",
                    tt.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(tt.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Column slice `[start, end)`.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(Error::shape("cols", format!("{start}..{end} of {}", ta.cols())));
        }
        let w = end - start;
        let mut out = Tensor::zeros(ta.rows(), w);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..end]);
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::Cols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Appends zero rows up to `rows` total.
    pub fn pad_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ta = self.value(a);
        if rows < ta.rows() {
            return Err(Error::shape("pad_rows", format!("{} rows > {rows}", ta.rows())));
        }
        let mut data = ta.data().to_vec();
        data.resize(rows * ta.cols(), 0.0);
        let out = Tensor::from_rows(rows, ta.cols(), data);
        let ng = self.needs(a);
        Ok(self.push(out, Op::PadRows(a), ng))
    }

    /// Zeroes every row whose flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if keep.len() != ta.rows() {
            return Err(Error::shape("mask_rows", format!("{} flags for {} rows", keep.len(), ta.rows())));
        }
        let mut out = ta.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).fill(0.0);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::MaskRows(a, keep.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `-Σ_t log softmax(logits_t)[target_t]` over positions with `mask_t`.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = (tl.rows(), tl.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "nll_sum",
                format!("{rows} logit rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        let mut probs = Tensor::zeros(rows, cols);
        let mut loss = 0.0;
        for r in 0..rows {
            softmax_row(tl.row(r), None, probs.row_mut(r)).expect("unmasked softmax");
            if mask[r] {
                let t = targets[r];
                if t >= cols {
                    return Err(Error::Data(format!("target id {t} >= vocab {cols}")));
                }
                loss -= log_softmax_at(tl.row(r), t);
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", tl.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::new(self.store.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.accumulate(*id, &g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.needs(*a) {
                        let ga = grad_slot(&mut grads, *a, m, k);
                        gemm(false, true, m, n, k, g.data(), tb.data(), 1.0, ga.data_mut());
                    }
                    if self.needs(*b) {
                        let gb = grad_slot(&mut grads, *b, k, n);
                        gemm(true, false, k, m, n, ta.data(), g.data(), 1.0, gb.data_mut());
                    }
                }
                Op::MatMulBt(a, b) => {
                    // out = a · bᵀ, a: m×k, b: n×k
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if self.needs(*a) {
                        let ga = grad_slot(&mut grads, *a, m, k);
                        gemm(false, false, m, n, k, g.data(), tb.data(), 1.0, ga.data_mut());
                    }
                    if self.needs(*b) {
                        let gb = grad_slot(&mut grads, *b, n, k);
                        gemm(true, false, n, m, k, g.data(), ta.data(), 1.0, gb.data_mut());
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            accumulate(&mut grads, v, &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        let gb = grad_slot(&mut grads, *b, 1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = grad_slot(&mut grads, *a, g.rows(), g.cols());
                        for ((acc, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                            *acc += gv * bv;
                        }
                    }
                    if self.needs(*b) {
                        let gb = grad_slot(&mut grads, *b, g.rows(), g.cols());
                        for ((acc, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                            *acc += gv * av;
                        }
                    }
                }
                Op::MulConst(a, c) => {
                    let ga = grad_slot(&mut grads, *a, g.rows(), g.cols());
                    for ((acc, gv), cv) in ga.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *acc += gv * cv;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = grad_slot(&mut grads, *a, g.rows(), g.cols());
                    for (acc, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *acc += gv * s;
                    }
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let ga = grad_slot(&mut grads, *a, g.rows(), g.cols());
                    for ((acc, gv), x) in ga.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        if *x > 0.0 {
                            *acc += gv;
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let ga = grad_slot(&mut grads, *a, g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (c, acc) in ga.row_mut(r).iter_mut().enumerate() {
                            *acc += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let tg = self.value(*gain);
                    if self.needs(*x) {
                        let gx = grad_slot(&mut grads, *x, rows, cols);
                        let mut dxhat = vec![0.0; cols];
                        for r in 0..rows {
                            let (gr, xh) = (g.row(r), xhat.row(r));
                            for c in 0..cols {
                                dxhat[c] = gr[c] * tg.data()[c];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                            let mean_dx =
                                dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                            for (c, acc) in gx.row_mut(r).iter_mut().enumerate() {
                                *acc += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    }
                    if self.needs(*gain) {
                        let gg = grad_slot(&mut grads, *gain, 1, cols);
                        for r in 0..rows {
                            for ((acc, gv), h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *acc += gv * h;
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let gb = grad_slot(&mut grads, *bias, 1, cols);
                        for r in 0..rows {
                            for (acc, gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *acc += gv;
                            }
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    let tt = self.value(*table);
                    let gt = grad_slot(&mut grads, *table, tt.rows(), tt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, gv) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                }
                Op::Cols(a, start) => {
                    let ta = self.value(*a);
                    let ga = grad_slot(&mut grads, *a, ta.rows(), ta.cols());
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                        for (acc, gv) in dst.iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let gp = grad_slot(&mut grads, p, g.rows(), w);
                            for r in 0..g.rows() {
                                for (acc, gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                    *acc += gv;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::PadRows(a) => {
                    let ta = self.value(*a);
                    let n = ta.len();
                    let ga = grad_slot(&mut grads, *a, ta.rows(), ta.cols());
                    for (acc, gv) in ga.data_mut().iter_mut().zip(&g.data()[..n]) {
                        *acc += gv;
                    }
                }
                Op::MaskRows(a, keep) => {
                    let ga = grad_slot(&mut grads, *a, g.rows(), g.cols());
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for (acc, gv) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                                *acc += gv;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    let s = g.data()[0];
                    let ga = grad_slot(&mut grads, *a, ta.rows(), ta.cols());
                    for acc in ga.data_mut() {
                        *acc += s;
                    }
                }
                Op::NllSum {
                    logits,
                    targets,
                    mask,
                    probs,
                } => {
                    let s = g.data()[0];
                    let gl = grad_slot(&mut grads, *logits, probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        if !mask[r] {
                            continue;
                        }
                        let row = gl.row_mut(r);
                        for (acc, p) in row.iter_mut().zip(probs.row(r)) {
                            *acc += s * p;
                        }
                        row[targets[r]] -= s;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Stable softmax of one row into `out`; masked entries get exactly 0.
pub(crate) fn softmax_row(row: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) -> std::result::Result<(), ()> {
    let ok = |c: usize| allowed.is_none_or(|m| m[c]);
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if ok(c) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for (c, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if ok(c) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", t, true);
        (s, id)
    }

    #[test]
    fn sum_grad_is_ones() {
        let (s, id) = store_with(Tensor::from_rows(2, 2, vec![1.0, -2.0, 3.0, 0.5]));
        let mut g = Graph::new(&s);
        let w = g.param(id);
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_grad_is_twice_w() {
        let w0 = Tensor::from_rows(1, 3, vec![1.5, -2.0, 0.25]);
        let (s, id) = store_with(w0.clone());
        let mut g = Graph::new(&s);
        let w = g.param(id);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(id).unwrap(), &w0.scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (s, id) = store_with(Tensor::zeros(2, 2));
        let mut g = Graph::new(&s);
        let w = g.param(id);
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut s = ParamStore::new();
        let frozen = s.add("f", Tensor::filled(1, 2, 2.0), false);
        let live = s.add("l", Tensor::filled(1, 2, 3.0), true);
        let mut g = Graph::new(&s);
        let (f, l) = (g.param(frozen), g.param(live));
        let p = g.mul(f, l).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(live).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn fully_masked_softmax_row_is_error() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(1, 2));
        assert!(g.masked_softmax(x, Some(&[false, false])).is_err());
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::from_rows(1, 3, vec![5.0, 1.0, 2.0]));
        let y = g.masked_softmax(x, Some(&[false, true, true])).unwrap();
        let v = g.value(y);
        assert_eq!(v.get(0, 0), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
