//! Tape-based reverse-mode differentiation over rank-2 `f64` arrays.
//!
//! A [`Graph`] records every operation eagerly. Parameters enter through
//! [`Graph::param`], which remembers the owning [`ParamStore`] so that
//! [`Graph::backward`] can hand back [`Gradients`] keyed by store.

use std::collections::HashMap;

use super::dist::logistic_mixture_row;
use super::{Gradients, NumError, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param((u64, usize)),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
    LogSumExpCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    LocalGrad(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// `c = beta * c + a * b` for row-major operands given as (row stride, col stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths cover every index reachable from the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Min(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::AddRow(a, b) | Op::MulCol(a, b) => self.needs(*a) || self.needs(*b),
            Op::Linear(x, w, b) => self.needs(*x) || self.needs(*w) || self.needs(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::LogSumExpCols(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::LocalGrad(a, _) => self.needs(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.needs(*v)),
            Op::LayerNorm { x, gain, bias, .. } => self.needs(*x) || self.needs(*gain) || self.needs(*bias),
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
        };
        self.nodes.push(Node { value: Tensor::matrix(rows, cols, data), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(r, c, t.into_data(), Op::Const)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(rows, cols, data, Op::Const)
    }

    /// Insert a parameter. Frozen parameters (requires_grad = false) enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.index());
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let t = store.get(id);
        let (r, c) = (t.rows(), t.cols());
        let op = if t.requires_grad { Op::Param(key) } else { Op::Const };
        let v = self.push(r, c, t.data().to_vec(), op);
        self.params.insert(key, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let d = self.data(v).to_vec();
        self.push(r, c, d, Op::Const)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(NumError::Shape(format!("matmul: ({m},{k}) x ({k2},{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k as isize, 1), self.data(b), (n as isize, 1), &mut out, 0.0);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        if k != k2 || self.shape(b) != (1, n) {
            return Err(NumError::Shape(format!("linear: x ({m},{k}), w ({k2},{n}), b {:?}", self.shape(b))));
        }
        let mut out = Vec::with_capacity(m * n);
        let bias = self.data(b);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.data(x), (k as isize, 1), self.data(w), (n as isize, 1), &mut out, 1.0);
        Ok(self.push(m, n, out, Op::Linear(x, w, b)))
    }

    // ---- elementwise binary ----

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        self.check_same(a, b, what)?;
        let (r, c) = self.shape(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(r, c, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "min", f64::min, Op::Min(a, b))
    }

    /// `a + row` where `row` is `(1, cols)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(NumError::Shape(format!("add_row: ({r},{c}) + {:?}", self.shape(row))));
        }
        let rv = self.data(row);
        let out = self.data(a).chunks(c).flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y)).collect();
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    /// `a * col` where `col` is `(rows, 1)`, broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(NumError::Shape(format!("mul_col: ({r},{c}) * {:?}", self.shape(col))));
        }
        let cv = self.data(col);
        let out =
            self.data(a).chunks(c.max(1)).zip(cv).flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s)).collect();
        Ok(self.push(r, c, out, Op::MulCol(a, col)))
    }

    // ---- elementwise unary ----

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.data(a).iter().map(|x| f(*x)).collect();
        self.push(r, c, out, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Hard clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `(r, c) -> (r, 1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.data(a).chunks(c.max(1)).map(|ch| ch.iter().sum()).collect();
        self.push(r, 1, out, Op::SumCols(a))
    }

    /// Column means: `(r, c) -> (1, c)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for ch in self.data(a).chunks(c.max(1)) {
            out.iter_mut().zip(ch).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r.max(1) as f64);
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// Row-wise log-sum-exp: `(r, c) -> (r, 1)`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .data(a)
            .chunks(c.max(1))
            .map(|ch| {
                let m = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + ch.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(r, 1, out, Op::LogSumExpCols(a))
    }

    // ---- layout ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let r = self.shape(parts[0]).0;
        if parts.iter().any(|p| self.shape(*p).0 != r) {
            return Err(NumError::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = self.shape(*p).1;
                out.extend_from_slice(&self.data(*p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(NumError::Shape(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for ch in self.data(a).chunks(c.max(1)) {
            out.extend_from_slice(&ch[start..end]);
        }
        Ok(self.push(r, w, out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let c = self.shape(parts[0]).1;
        if parts.iter().any(|p| self.shape(*p).1 != c) {
            return Err(NumError::Shape("concat_rows: column counts differ".into()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            out.extend_from_slice(self.data(*p));
            rows += self.shape(*p).0;
        }
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(NumError::Shape(format!("slice_rows {start}..{end} of {r}")));
        }
        let out = self.data(a)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start)))
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.shape(a);
        if let Some(bad) = indices.iter().find(|&&i| i >= r) {
            return Err(NumError::Shape(format!("gather_rows index {bad} out of {r} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&self.data(a)[i * c..(i + 1) * c]);
        }
        Ok(self.push(indices.len(), c, out, Op::GatherRows(a, indices.to_vec())))
    }

    // ---- fused blocks ----

    /// Row-wise layer normalisation with learned gain and bias, both `(1, cols)`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(NumError::Shape(format!("layer_norm over {c} columns")));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        let (g, b) = (self.data(gain), self.data(bias));
        for ch in self.data(x).chunks(c) {
            let mean = ch.iter().sum::<f64>() / c as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (j, v) in ch.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `(batch * seq, width)` with rows grouped by sequence.
    /// Keys at positions where `mask` is false are excluded; every sequence
    /// must keep at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, NumError> {
        let (rows, width) = self.shape(q);
        if self.shape(k) != (rows, width) || self.shape(v) != (rows, width) {
            return Err(NumError::Shape("attention: q/k/v shapes differ".into()));
        }
        if rows != batch * seq || mask.len() != rows || heads == 0 || width % heads != 0 {
            return Err(NumError::Shape(format!(
                "attention: {rows} rows for batch {batch} x seq {seq}, width {width}, heads {heads}"
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            if !mask[base..base + seq].iter().any(|m| *m) {
                return Err(NumError::Shape(format!("attention: sequence {b} is fully masked")));
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(base + i) * width + off..(base + i) * width + off + dh];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[base + j] {
                            let kj = &kd[(base + j) * width + off..(base + j) * width + off + dh];
                            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[j] = s;
                            m = m.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    let mut z = 0.0;
                    for j in 0..seq {
                        if mask[base + j] {
                            p[j] = (scores[j] - m).exp();
                            z += p[j];
                        }
                    }
                    let o = &mut out[(base + i) * width + off..(base + i) * width + off + dh];
                    for j in 0..seq {
                        if mask[base + j] {
                            p[j] /= z;
                            let vj = &vd[(base + j) * width + off..(base + j) * width + off + dh];
                            o.iter_mut().zip(vj).for_each(|(a, b)| *a += p[j] * b);
                        }
                    }
                }
            }
        }
        Ok(self.push(rows, width, out, Op::Attention { q, k, v, batch, seq, heads, probs }))
    }

    /// Discretised logistic mixture log-likelihood.
    ///
    /// `params` is `(rows, dims * 3 * components)`, laid out per action
    /// dimension as `[logits | means | log_scales]`. `targets` holds
    /// `rows * dims` values in `[-1, 1]`. Returns `(rows, dims)` log-masses.
    /// Out-of-range targets fall into the edge bins; the count of such
    /// targets is returned alongside the result.
    pub fn logistic_mixture_logprob(
        &mut self,
        params: Var,
        targets: &[f64],
        dims: usize,
        components: usize,
        bins: usize,
    ) -> Result<(Var, usize), NumError> {
        let (r, c) = self.shape(params);
        if c != dims * 3 * components || targets.len() != r * dims {
            return Err(NumError::Shape(format!(
                "logistic mixture: params ({r},{c}) for {dims} dims x {components} components, {} targets",
                targets.len()
            )));
        }
        if bins < 1 {
            return Err(NumError::Domain("logistic mixture needs at least one bin".into()));
        }
        let width = 3 * components;
        let mut out = Vec::with_capacity(r * dims);
        let mut local = vec![0.0; r * c];
        let mut clamped = 0;
        let pd = self.data(params);
        for i in 0..r {
            for d in 0..dims {
                let t = targets[i * dims + d];
                if !(-1.0..=1.0).contains(&t) {
                    clamped += 1;
                }
                let off = i * c + d * width;
                let (lp, g) = logistic_mixture_row(&pd[off..off + width], components, t, bins);
                out.push(lp);
                local[off..off + width].copy_from_slice(&g);
            }
        }
        let v = self.push(r, dims, out, Op::LocalGrad(params, local));
        Ok((v, clamped))
    }

    // ---- backward ----

    /// Reverse sweep from a `(1, 1)` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if self.shape(loss) != (1, 1) {
            return Err(NumError::NonScalarLoss(self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, _) = grads.split_at_mut(i);
            self.propagate(node, &g, lower, &mut out);
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        slot.as_mut()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let (rows, cols) = (node.value.rows(), node.value.cols());
        let y = node.value.data();
        match &node.op {
            Op::Const => {}
            Op::Param(key) => out.accumulate(*key, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, (n as isize, 1), self.data(*b), (1, n as isize), ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, self.data(*a), (1, k as isize), g, (n as isize, 1), gb, 1.0);
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = self.shape(*x);
                let n = cols;
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(m, n, k, g, (n as isize, 1), self.data(*w), (1, n as isize), gx, 1.0);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(k, m, n, self.data(*x), (1, k as isize), g, (n as isize, 1), gw, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ch in g.chunks(n) {
                        gb.iter_mut().zip(ch).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let ga = self.acc(grads, *a).unwrap();
                    for ((x, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let gb = self.acc(grads, *b).unwrap();
                    for ((x, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gv * av;
                    }
                }
            }
            Op::Min(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if ad[i] <= bd[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        if ad[i] > bd[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for ch in g.chunks(cols) {
                        gr.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    let cd = self.data(*col);
                    let ga = self.acc(grads, *a).unwrap();
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[r * cols + c] * cd[r];
                        }
                    }
                }
                if self.needs(*col) {
                    let ad = self.data(*a);
                    let gc = self.acc(grads, *col).unwrap();
                    for r in 0..rows {
                        gc[r] += (0..cols).map(|c| g[r * cols + c] * ad[r * cols + c]).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Tanh(a) => self.unary(grads, *a, g, |i, _| 1.0 - y[i] * y[i]),
            Op::Relu(a) => self.unary(grads, *a, g, |_, x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(a) => self.unary(grads, *a, g, |i, _| y[i] * (1.0 - y[i])),
            Op::Exp(a) => self.unary(grads, *a, g, |i, _| y[i]),
            Op::Log(a) => self.unary(grads, *a, g, |_, x| 1.0 / x),
            Op::Softplus(a) => self.unary(grads, *a, g, |_, x| sigmoid(x)),
            Op::Square(a) => self.unary(grads, *a, g, |_, x| 2.0 * x),
            Op::Clamp(a, lo, hi) => self.unary(grads, *a, g, |_, x| if x < *lo || x > *hi { 0.0 } else { 1.0 }),
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumCols(a) => {
                let c = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, ch) in ga.chunks_mut(c.max(1)).enumerate() {
                        ch.iter_mut().for_each(|x| *x += g[r]);
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let inv = 1.0 / r.max(1) as f64;
                    for ch in ga.chunks_mut(c.max(1)) {
                        ch.iter_mut().zip(g).for_each(|(x, gv)| *x += gv * inv);
                    }
                }
            }
            Op::LogSumExpCols(a) => {
                let c = self.shape(*a).1;
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for j in 0..c {
                            ga[r * c + j] += g[r] * (ad[r * c + j] - y[r]).exp();
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            for j in 0..pc {
                                gp[r * pc + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * c + start + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let base = start * cols;
                    ga[base..base + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = cols;
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for ch in g.chunks(c) {
                        gb.iter_mut().zip(ch).for_each(|(a, b)| *a += b);
                    }
                }
                if self.needs(*x) {
                    let gain_d = self.data(*gain);
                    let gx = self.acc(grads, *x).unwrap();
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gain_d[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * c + j];
                        }
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] / n * (n * dxhat[j] - s1 - xhat[r * c + j] * s2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(grads, g, (*q, *k, *v), (*batch, *seq, *heads), probs, cols);
            }
            Op::LocalGrad(a, local) => {
                let (r, c) = self.shape(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let dims = cols;
                    let width = c / dims.max(1);
                    for i in 0..r {
                        for d in 0..dims {
                            let gv = g[i * dims + d];
                            let off = i * c + d * width;
                            for j in 0..width {
                                ga[off + j] += gv * local[off + j];
                            }
                        }
                    }
                }
            }
        }
    }

    fn unary(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], d: impl Fn(usize, f64) -> f64) {
        if !self.needs(a) {
            return;
        }
        let ad = self.data(a);
        let ga = self.acc(grads, a).unwrap();
        for i in 0..g.len() {
            ga[i] += g[i] * d(i, ad[i]);
        }
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        width: usize,
    ) {
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let rows = batch * seq;
        let mut gq = vec![0.0; rows * width];
        let mut gk = vec![0.0; rows * width];
        let mut gv = vec![0.0; rows * width];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    let go = &g[(base + i) * width + off..(base + i) * width + off + dh];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(base + j) * width + off..(base + j) * width + off + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        let gvj = &mut gv[(base + j) * width + off..(base + j) * width + off + dh];
                        gvj.iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                    }
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for t in 0..dh {
                            gq[(base + i) * width + off + t] += ds * kd[(base + j) * width + off + t];
                            gk[(base + j) * width + off + t] += ds * qd[(base + i) * width + off + t];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(ga) = self.acc(grads, var) {
                ga.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
