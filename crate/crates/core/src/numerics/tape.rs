//! Reverse-mode automatic differentiation over [`Tensor2D`] values.
//!
//! A [`Tape`] records every operation in evaluation order. Forward values are
//! computed eagerly on push; [`Tape::backward`] walks the record in reverse
//! and accumulates adjoints. Shape mismatches inside a tape are programming
//! errors and panic; the only recoverable failure is a degenerate softmax
//! mask, which is surfaced as [`CalecError::DegenerateMask`].

use std::sync::Arc;

use super::ops::{self, LAYER_NORM_EPS};
use super::tensor::Tensor2D;
use crate::error::{CalecError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<(usize, usize)>),
    ScatterCols(Var, Vec<usize>),
    CrossEntropy(Var, usize, Vec<f64>),
    Pick(Var, usize, usize),
    Sum(Var),
}

struct Node {
    value: Tensor2D,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct TapeGrads {
    grads: Vec<Option<Tensor2D>>,
}

impl TapeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2D> {
        self.grads[v.0].take()
    }
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

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shape");
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b)).expect("matmul_t shape");
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape");
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "add_row shape");
        let r = r.row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "mul_row shape");
        let r = r.row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, g) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= g;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    /// Multiplies row `i` of `a` by the scalar `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.shape(), (self.value(a).rows(), 1), "mul_col shape");
        let c = c.data().to_vec();
        let mut value = self.value(a).clone();
        for (i, s) in c.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 - v);
        self.push(value, Op::OneMinus(a))
    }

    /// Per-row normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = ops::layer_norm_rows(x);
        let inv_std = (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                1.0 / (var + LAYER_NORM_EPS).sqrt()
            })
            .collect();
        self.push(value, Op::LayerNorm(a, inv_std))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `a`).
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Result<Var> {
        let value = ops::masked_softmax_rows(self.value(a), &mask)?;
        Ok(self.push(value, Op::MaskedSoftmax(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mask: Arc<[bool]> = vec![true; self.value(a).len()].into();
        self.masked_softmax(a, mask).expect("full mask is never degenerate")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat_cols rows");
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows cols");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor2D::from_vec(rows, cols, data).expect("concat_rows");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let mut value = Tensor2D::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    /// Row gather: output row `i` is a copy of `a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    /// Mean of each end-exclusive row span.
    pub fn segment_mean(&mut self, a: Var, spans: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let mut value = Tensor2D::zeros(spans.len(), x.cols());
        for (k, &(s, e)) in spans.iter().enumerate() {
            let n = (e - s) as f64;
            let out = value.row_mut(k);
            for r in s..e {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= n;
            }
        }
        self.push(value, Op::SegmentMean(a, spans.to_vec()))
    }

    /// Column scatter-add: `out[r, map[c]] += a[r, c]`, output width `width`.
    pub fn scatter_cols(&mut self, a: Var, map: &[usize], width: usize) -> Var {
        let x = self.value(a);
        assert_eq!(map.len(), x.cols(), "scatter_cols map");
        let mut value = Tensor2D::zeros(x.rows(), width);
        for r in 0..x.rows() {
            for (c, &t) in map.iter().enumerate() {
                value.row_mut(r)[t] += x.get(r, c);
            }
        }
        self.push(value, Op::ScatterCols(a, map.to_vec()))
    }

    /// `-log softmax(a)[target]` for a `1 x n` row of logits.
    pub fn cross_entropy(&mut self, a: Var, target: usize) -> Result<Var> {
        let x = self.value(a);
        assert_eq!(x.rows(), 1, "cross_entropy expects a single row");
        let loss = ops::cross_entropy(x.row(0), target)?;
        let probs = ops::softmax(x.row(0));
        Ok(self.push(Tensor2D::scalar(loss), Op::CrossEntropy(a, target, probs)))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let value = Tensor2D::scalar(self.value(a).get(r, c));
        self.push(value, Op::Pick(a, r, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2D::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, items: &[Var]) -> Var {
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// `x · W (+ b)` with `b` a `1 x c` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> TapeGrads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2D::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul_t(bv).expect("matmul grad");
                    let gb = av.t_matmul(&g).expect("matmul grad");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(bv).expect("matmul_t grad");
                    let gb = g.t_matmul(av).expect("matmul_t grad");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let mut ga = g.clone();
                    let mut gr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.row_mut(r)[c] *= rv.get(0, c);
                            gr.row_mut(0)[c] += g.get(r, c) * av.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = Tensor2D::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.get(r, 0);
                        let mut acc = 0.0;
                        for c in 0..g.cols() {
                            acc += g.get(r, c) * av.get(r, c);
                            ga.row_mut(r)[c] *= s;
                        }
                        gc.set(r, 0, acc);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *col, gc);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.map(|v| -v)),
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Tensor2D::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let sum_g: f64 = gy.iter().sum();
                        let sum_gy: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] / n * (n * gy[c] - sum_g - yr[c] * sum_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *o *= ops::gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (o, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let mut ga = g;
                    for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o /= x;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor2D::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let dotp: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gy[c] - dotp);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Tensor2D::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        accumulate(&mut grads, *p, g.slice_rows(off, off + h));
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let mut ga = Tensor2D::zeros(x.rows(), x.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, spans) => {
                    let x = self.value(*a);
                    let mut ga = Tensor2D::zeros(x.rows(), x.cols());
                    for (k, &(s, e)) in spans.iter().enumerate() {
                        let n = (e - s) as f64;
                        for r in s..e {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o += v / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterCols(a, map) => {
                    let mut ga = Tensor2D::zeros(g.rows(), map.len());
                    for r in 0..g.rows() {
                        for (c, &t) in map.iter().enumerate() {
                            ga.set(r, c, g.get(r, t));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, target, probs) => {
                    let s = g.item();
                    let mut ga = Tensor2D::row_vector(probs);
                    ga.row_mut(0)[*target] -= 1.0;
                    ga.scale_assign(s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, r, c) => {
                    let x = self.value(*a);
                    let mut ga = Tensor2D::zeros(x.rows(), x.cols());
                    ga.set(*r, *c, g.item());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Tensor2D::filled(x.rows(), x.cols(), g.item()));
                }
            }
        }
        TapeGrads { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Checks that a forward value is finite, naming `what` otherwise.
pub fn ensure_finite(t: &Tensor2D, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(CalecError::Numeric(format!("non-finite value in {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a tape builder.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, input: Tensor2D) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or(Tensor2D::zeros(input.rows(), input.cols()));
        let eps = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data_mut()[i] += delta;
                let mut t = Tape::new();
                let x = t.leaf(p);
                let l = build(&mut t, x);
                t.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "coordinate {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_and_norm_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(4, 3, &mut rng);
        let row = random(1, 3, &mut rng);
        check(
            |t, x| {
                let w = t.leaf(w.clone());
                let r = t.leaf(row.clone());
                let y = t.matmul(x, w);
                let y = t.layer_norm(y);
                let y = t.mul_row(y, r);
                let y = t.add_row(y, r);
                let y = t.gelu(y);
                let y = t.sigmoid(y);
                let y = t.log(y);
                t.sum(y)
            },
            random(2, 4, &mut rng),
        );
    }

    #[test]
    fn attention_style_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random(3, 4, &mut rng);
        let mask: Arc<[bool]> = vec![true, false, true, true, true, false].into();
        check(
            |t, x| {
                let k = t.leaf(k.clone());
                let s = t.matmul_t(x, k);
                let s = t.scale(s, 0.5);
                let a = t.masked_softmax(s, mask.clone()).unwrap();
                let v = t.matmul(a, k);
                let c = t.concat_cols(&[v, x]);
                let r = t.concat_rows(&[c, c]);
                let g = t.gather_rows(r, &[3, 0, 0]);
                let m = t.segment_mean(g, &[(0, 2), (2, 3)]);
                let sl = t.slice_cols(m, 1, 6);
                let sl = t.slice_rows(sl, 1, 2);
                let sc = t.scatter_cols(sl, &[0, 2, 2, 1, 0], 3);
                t.cross_entropy(sc, 2).unwrap()
            },
            random(2, 4, &mut rng),
        );
    }

    #[test]
    fn gate_style_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(3, 4, &mut rng);
        check(
            |t, x| {
                let p = t.leaf(p.clone());
                let p = t.softmax(p);
                let g = t.slice_cols(x, 0, 1);
                let g = t.sigmoid(g);
                let om = t.one_minus(g);
                let a = t.mul_col(p, g);
                let b = t.mul_col(p, om);
                let b = t.scale(b, 0.3);
                let m = t.add(a, b);
                let l = t.log(m);
                let picks = [t.pick(l, 0, 1), t.pick(l, 2, 3)];
                t.add_all(&picks)
            },
            random(3, 2, &mut rng),
        );
    }

    #[test]
    fn degenerate_mask_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2D::zeros(2, 2));
        let err = tape.masked_softmax(x, vec![true, false, false, false].into()).unwrap_err();
        assert!(matches!(err, CalecError::DegenerateMask { row: 1 }));
    }
}
