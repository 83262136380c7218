//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Each node owns its
//! forward value; [`Tape::backward`] walks the nodes in reverse and returns the
//! gradient of a scalar output with respect to every node that requires one.
//! Constants never receive gradients, and subgraphs that only depend on
//! constants are skipped during the reverse sweep.

use crate::matrix::Matrix;
use crate::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    SoftmaxRows(Var),
    Softplus(Var),
    Square(Var),
    Recip(Var),
    Relu(Var),
    RowSums(Var),
    Sum(Var),
    MeanRows {
        src: Var,
        start: usize,
        end: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Quantile {
        src: Var,
        level: Var,
        lo: usize,
        hi: usize,
        frac: f64,
        span: f64,
    },
    Log1pSumExp(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or a zero matrix of shape `shape` if nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let rows = if a.0 == b.0 || b.0 == 1 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else {
        panic!("cannot broadcast rows {a:?} with {b:?}")
    };
    let cols = if a.1 == b.1 || b.1 == 1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else {
        panic!("cannot broadcast cols {a:?} with {b:?}")
    };
    (rows, cols)
}

#[inline]
fn bget(m: &Matrix, r: usize, c: usize) -> f64 {
    let rr = if m.rows == 1 { 0 } else { r };
    let cc = if m.cols == 1 { 0 } else { c };
    m.data[rr * m.cols + cc]
}

fn broadcast_binary(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.data[r * cols + c] = f(bget(a, r, c), bget(b, r, c));
        }
    }
    out
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..grad.rows {
        for c in 0..grad.cols {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            out.data[rr * shape.1 + cc] += grad.data[r * grad.cols + c];
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

/// `log(1 + sum_i exp(x_i))` evaluated with a shifted maximum.
pub fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(0.0_f64, f64::max);
    let s: f64 = (-m).exp() + xs.iter().map(|&x| (x - m).exp()).sum::<f64>();
    m + s.ln()
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param, true)
    }

    /// A `1 x 1` parameter leaf.
    pub fn scalar_var(&mut self, v: f64) -> Var {
        self.param(Matrix::scalar(v))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A constant copy of `a`'s current value: gradients stop here.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (c, e) in exps.into_iter().enumerate() {
                out.data[r * x.cols + c] = e / s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    /// `max(a, 0)` elementwise.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Sums each row, producing an `rows x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        let v = Matrix::col_vector(data);
        let ng = self.ng(a);
        self.push(v, Op::RowSums(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Column-wise mean over rows `start..end`, producing `1 x cols`.
    pub fn mean_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(
            start < end && end <= x.rows,
            "mean_rows range out of bounds"
        );
        let n = (end - start) as f64;
        let mut out = vec![0.0; x.cols];
        for r in start..end {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        let ng = self.ng(a);
        self.push(
            Matrix::row_vector(out),
            Op::MeanRows { src: a, start, end },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(
            start < end && end <= x.cols,
            "slice_cols range out of bounds"
        );
        let w = end - start;
        let mut out = Matrix::zeros(x.rows, w);
        for r in 0..x.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&x.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { src: a, start }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * x.cols);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let v = Matrix::from_vec(rows.len(), x.cols, data);
        let ng = self.ng(a);
        self.push(
            v,
            Op::GatherRows {
                src: a,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Linear-interpolation empirical quantile of all entries of `src` at the
    /// level held in the `1 x 1` node `level` (clamped to `[0, 1]`).
    ///
    /// The result is differentiable in the two active order statistics and in
    /// the level itself.
    pub fn quantile(&mut self, src: Var, level: Var) -> Var {
        let x = self.value(src);
        assert!(!x.is_empty(), "quantile of empty input");
        let order = quantile::ascending_order(&x.data);
        let n = order.len();
        let span = (n - 1) as f64;
        let raw_level = self.scalar(level);
        let k = quantile::knots(n, raw_level);
        let frac = k.frac;
        let lo = order[k.lo_rank];
        let hi = order[k.hi_rank];
        let value = (1.0 - frac) * x.data[lo] + frac * x.data[hi];
        let level_active = (0.0..=1.0).contains(&raw_level);
        let ng = self.ng(src) || self.ng(level);
        self.push(
            Matrix::scalar(value),
            Op::Quantile {
                src,
                level,
                lo,
                hi,
                frac,
                span: if level_active { span } else { 0.0 },
            },
            ng,
        )
    }

    /// `log(1 + sum(exp(a)))` over all entries; zero entries gives 0.
    pub fn log1p_sum_exp(&mut self, a: Var) -> Var {
        let v = log1p_sum_exp(&self.value(a).data);
        let ng = self.ng(a);
        self.push(Matrix::scalar(v), Op::Log1pSumExp(a), ng)
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bv));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, av.t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul(bv));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.t_matmul(av));
                }
            }
            Op::Add(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                self.accumulate(grads, *a, reduce_to(g, sa));
                self.accumulate(grads, *b, reduce_to(g, sb));
            }
            Op::Sub(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                self.accumulate(grads, *a, reduce_to(g, sa));
                if self.ng(*b) {
                    let mut gb = reduce_to(g, sb);
                    gb.scale_assign(-1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let full = broadcast_binary(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&full, av.shape()));
                }
                if self.ng(*b) {
                    let full = broadcast_binary(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&full, bv.shape()));
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols {
                        out.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = broadcast_binary(g, x, |gv, xv| gv * sigmoid(xv));
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let d = broadcast_binary(g, x, |gv, xv| 2.0 * gv * xv);
                self.accumulate(grads, *a, d);
            }
            Op::Recip(a) => {
                let x = self.value(*a);
                let d = broadcast_binary(g, x, |gv, xv| -gv / (xv * xv));
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = broadcast_binary(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    for c in 0..x.cols {
                        d.data[r * x.cols + c] = g.data[r];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(x.rows, x.cols, g.data[0]));
            }
            Op::MeanRows { src, start, end } => {
                let x = self.value(*src);
                let n = (end - start) as f64;
                let mut d = Matrix::zeros(x.rows, x.cols);
                for r in *start..*end {
                    for c in 0..x.cols {
                        d.data[r * x.cols + c] = g.data[c] / n;
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::SliceCols { src, start } => {
                let x = self.value(*src);
                let mut d = Matrix::zeros(x.rows, x.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        d.data[r * x.cols + start + c] = g.data[r * g.cols + c];
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::GatherRows { src, rows } => {
                let x = self.value(*src);
                let mut d = Matrix::zeros(x.rows, x.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..x.cols {
                        d.data[r * x.cols + c] += g.data[i * x.cols + c];
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let m = self.value(*p);
                    if self.ng(*p) {
                        let mut d = Matrix::zeros(m.rows, m.cols);
                        for r in 0..m.rows {
                            d.data[r * m.cols..(r + 1) * m.cols]
                                .copy_from_slice(&g.row(r)[off..off + m.cols]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    off += m.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let m = self.value(*p);
                    if self.ng(*p) {
                        let d =
                            Matrix::from_vec(m.rows, m.cols, g.data[off..off + m.len()].to_vec());
                        self.accumulate(grads, *p, d);
                    }
                    off += m.len();
                }
            }
            Op::Quantile {
                src,
                level,
                lo,
                hi,
                frac,
                span,
            } => {
                let gv = g.data[0];
                let x = self.value(*src);
                if self.ng(*src) {
                    let mut d = Matrix::zeros(x.rows, x.cols);
                    d.data[*lo] += (1.0 - frac) * gv;
                    d.data[*hi] += frac * gv;
                    self.accumulate(grads, *src, d);
                }
                if self.ng(*level) {
                    let slope = span * (x.data[*hi] - x.data[*lo]);
                    self.accumulate(grads, *level, Matrix::scalar(slope * gv));
                }
            }
            Op::Log1pSumExp(a) => {
                let x = self.value(*a);
                let out = node.value.data[0];
                let d = x.map(|v| g.data[0] * (v - out).exp());
                self.accumulate(grads, *a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let eps = 1e-6;
        let mut out = Matrix::zeros(x0.rows, x0.cols);
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data[i] += eps;
            let mut m = x0.clone();
            m.data[i] -= eps;
            out.data[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{x} vs {y}"
            );
        }
    }

    #[test]
    fn attention_like_chain_matches_finite_differences() {
        let x0 = Matrix::from_vec(3, 2, vec![0.3, -0.2, 0.9, 0.4, -0.5, 0.1]);
        let w = Matrix::from_vec(2, 2, vec![0.5, -1.0, 0.25, 0.75]);
        let build = |x: &Matrix, want_grad: bool| {
            let mut t = Tape::new();
            let xv = if want_grad {
                t.param(x.clone())
            } else {
                t.constant(x.clone())
            };
            let wv = t.constant(w.clone());
            let q = t.matmul(xv, wv);
            let s = t.matmul_t(q, xv);
            let a = t.softmax_rows(s);
            let o = t.matmul(a, xv);
            let sp = t.softplus(o);
            let m = t.mean_rows(sp, 0, 2);
            let sq = t.square(m);
            let out = t.sum(sq);
            (t, xv, out)
        };
        let (t, xv, out) = build(&x0, true);
        let g = t.backward(out);
        let num = numeric_grad(&x0, |x| {
            let (t, _, o) = build(x, false);
            t.scalar(o)
        });
        assert_close(g.get(xv).unwrap(), &num, 1e-7);
    }

    #[test]
    fn quantile_gradient_flows_to_order_statistics_and_level() {
        let x0 = Matrix::col_vector(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        let mut t = Tape::new();
        let xv = t.param(x0);
        let lv = t.param(Matrix::scalar(0.9));
        let q = t.quantile(xv, lv);
        assert!((t.scalar(q) - 4.6).abs() < 1e-12);
        let g = t.backward(q);
        let gx = g.get(xv).unwrap();
        // position 3.6 -> ranks 3 (value 4, index 4) and 4 (value 5, index 0)
        assert!((gx.data[4] - 0.4).abs() < 1e-12);
        assert!((gx.data[0] - 0.6).abs() < 1e-12);
        assert!((g.get(lv).unwrap().data[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn log1p_sum_exp_is_stable_and_handles_empty() {
        assert_eq!(log1p_sum_exp(&[]), 0.0);
        assert!((log1p_sum_exp(&[0.0]) - 2f64.ln()).abs() < 1e-15);
        let big = log1p_sum_exp(&[1000.0, 1000.0]);
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn broadcasting_ops_reduce_gradients() {
        let mut t = Tape::new();
        let a = t.param(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.param(Matrix::row_vector(vec![1.0, 1.0, 2.0]));
        let s = t.scalar_var(2.0);
        let d = t.sub(a, b);
        let m = t.mul(d, s);
        let out = t.sum(m);
        let g = t.backward(out);
        assert_eq!(g.get(b).unwrap().data, vec![-4.0, -4.0, -4.0]);
        assert_eq!(g.get(a).unwrap().data, vec![2.0; 6]);
        assert_eq!(g.get(s).unwrap().data, vec![21.0 - 8.0]);
    }
}
