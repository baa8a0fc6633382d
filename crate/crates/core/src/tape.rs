//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of a forward pass. Trainable parameters
//! enter through [`Tape::param`] (or [`Tape::gather_param`] for embedding
//! lookups) and their gradients come back from [`Tape::backward`] keyed by the
//! caller-supplied parameter index. Nodes that cannot reach a trainable
//! parameter are skipped during the backward sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    GatherParam { param: usize, table_rows: usize, indices: Vec<usize> },
    Gather { table: Var, indices: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulMask(Var, Mat),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow { x: Var, row: usize },
    MeanRows(Var),
    MaskedSoftmax(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Mat },
    RowDot(Var, Var),
    Softplus(Var),
    Mean(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf. `index` identifies the parameter in [`Tape::backward`]'s result.
    pub fn param(&mut self, index: usize, value: Mat) -> Var {
        self.push(value, Op::Param(index), true)
    }

    /// Rows of an embedding table. When `param` is `Some`, gradients flow back
    /// to that parameter index without copying the whole table onto the tape.
    pub fn gather_param(&mut self, table: &Mat, param: Option<usize>, indices: &[usize]) -> Var {
        let mut out = Mat::zeros(indices.len(), table.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        match param {
            Some(p) => self.push(
                out,
                Op::GatherParam {
                    param: p,
                    table_rows: table.rows,
                    indices: indices.to_vec(),
                },
                true,
            ),
            None => self.push(out, Op::Constant, false),
        }
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(indices.len(), t.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(&self.value(b).scale(-1.0));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Adds the `1 × n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "add_row: bias must be a row vector");
        let mut v = self.value(x).clone();
        assert_eq!(v.cols, b.cols, "add_row: width mismatch");
        for r in 0..v.rows {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_mask(&mut self, x: Var, mask: Mat) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape(), "mul_mask shape");
        let data = xv.data.iter().zip(&mask.data).map(|(a, m)| a * m).collect();
        let v = Mat::from_vec(xv.rows, xv.cols, data);
        let rg = self.rg(x);
        self.push(v, Op::MulMask(x, mask), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let v = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&a| f(a)).collect());
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let n = xv.cols as f64;
        let mut xhat = Mat::zeros(xv.rows, xv.cols);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, g.data[c] * h + b.data[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).slice_cols(start, width);
        let rg = self.rg(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows: col mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let v = Mat::row_vector(self.value(x).row(row).to_vec());
        let rg = self.rg(x);
        self.push(v, Op::SelectRow { x, row }, rg)
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = Mat::row_vector(self.value(x).mean_rows());
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    /// Row-wise softmax where columns with `key_mask[c] == false` get weight 0.
    pub fn masked_softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = key_mask {
            if m.len() != xv.cols {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask length {} vs {} keys", m.len(), xv.cols),
                ));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Numeric("attention row has every key masked".into()));
            }
        }
        let keep = |c: usize| key_mask.map_or(true, |m| m[c]);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let max = (0..xv.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..xv.cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out.set(r, c, e);
                    sum += e;
                }
            }
            for o in out.row_mut(r) {
                *o /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "cannot normalize row {r} with norm {n}"
                )));
            }
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, as a `1 × 1` value.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), lv.rows),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("non-finite similarity in loss".into()));
        }
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|a| (a - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for c in 0..lv.cols {
                probs.set(r, c, (row[c] - lse).exp());
            }
        }
        let loss = total / lv.rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-row dot products as an `n × 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape");
        let data = (0..av.rows).map(|r| dot(av.row(r), bv.row(r))).collect();
        let v = Mat::from_vec(av.rows, 1, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::RowDot(a, b), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Mat::from_vec(1, 1, vec![m]), Op::Mean(x), rg)
    }

    /// Gradients of the scalar `output` with respect to every parameter index
    /// reachable from it.
    pub fn backward(&self, output: Var) -> BTreeMap<usize, Mat> {
        let mut params: BTreeMap<usize, Mat> = BTreeMap::new();
        if !self.rg(output) {
            return params;
        }
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        let out = self.value(output);
        grads[output.0] = Some(Mat::filled(out.rows, out.cols, 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => match params.get_mut(p) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        params.insert(*p, g);
                    }
                },
                Op::GatherParam {
                    param,
                    table_rows,
                    indices,
                } => {
                    let entry = params
                        .entry(*param)
                        .or_insert_with(|| Mat::zeros(*table_rows, g.cols));
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in entry.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Gather { table, indices } => {
                    if self.rg(*table) {
                        let t = self.value(*table);
                        let mut dt = Mat::zeros(t.rows, t.cols);
                        for (r, &i) in indices.iter().enumerate() {
                            for (o, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *table, dt);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.rg(*bias) {
                        acc(&mut grads, *bias, Mat::row_vector(sum_rows(&g)));
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s)),
                Op::MulMask(x, m) => {
                    let data = g.data.iter().zip(&m.data).map(|(a, b)| a * b).collect();
                    acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Tanh(x) => {
                    let data = g.data.iter().zip(&y.data).map(|(d, t)| d * (1.0 - t * t)).collect();
                    acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g.data.iter().zip(&xv.data).map(|(d, a)| d * gelu_grad(*a)).collect();
                    acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let data = g.data.iter().zip(&xv.data).map(|(d, a)| d * sigmoid(*a)).collect();
                    acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    if self.rg(*gain) {
                        let mut dg = vec![0.0; g.cols];
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                dg[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        acc(&mut grads, *gain, Mat::row_vector(dg));
                    }
                    if self.rg(*bias) {
                        acc(&mut grads, *bias, Mat::row_vector(sum_rows(&g)));
                    }
                    if self.rg(*x) {
                        let n = g.cols as f64;
                        let mut dx = Mat::zeros(g.rows, g.cols);
                        for r in 0..g.rows {
                            let dxhat: Vec<f64> =
                                (0..g.cols).map(|c| g.get(r, c) * gv.data[c]).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat
                                .iter()
                                .zip(xhat.row(r))
                                .map(|(d, h)| d * h)
                                .sum();
                            for c in 0..g.cols {
                                let v = inv_std[r] / n
                                    * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                                dx.set(r, c, v);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice_cols(offset, w));
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        if self.rg(p) {
                            let data = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                            acc(&mut grads, p, Mat::from_vec(rows, g.cols, data));
                        }
                        offset += rows;
                    }
                }
                Op::SelectRow { x, row } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    dx.row_mut(*row).copy_from_slice(&g.data);
                    acc(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.rows as f64;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        for (o, d) in dx.row_mut(r).iter_mut().zip(&g.data) {
                            *o = d / n;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(x) => {
                    let mut dx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let s = dot(y.row(r), g.row(r));
                        for c in 0..g.cols {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - s));
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let mut dx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let s = dot(y.row(r), g.row(r));
                        for c in 0..g.cols {
                            dx.set(r, c, (g.get(r, c) - y.get(r, c) * s) / norms[r]);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.data[0] / probs.rows as f64;
                    let mut dl = probs.scale(scale);
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dl.get(r, t) - scale;
                        dl.set(r, t, v);
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut da = bv.clone();
                        for r in 0..da.rows {
                            let s = g.data[r];
                            da.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        acc(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = av.clone();
                        for r in 0..db.rows {
                            let s = g.data[r];
                            db.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let n = xv.len() as f64;
                    acc(&mut grads, *x, Mat::filled(xv.rows, xv.cols, g.data[0] / n));
                }
            }
        }
        params
    }
}

fn sum_rows(g: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; g.cols];
    for r in 0..g.rows {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
