//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward pass of the model records its operations on a [`Graph`].
//! Parameters enter as cached leaves, so branches that share weights share
//! one leaf and their gradients accumulate naturally on the way back.

use std::collections::HashMap;

use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

/// Marker in a gather index for "emit zero".
pub const ZERO: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Gather { src: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Mse { x: Var, target: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A differentiable leaf that is not backed by a parameter store.
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_ext(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = if ta { va.cols } else { va.rows };
        let n = if tb { vb.rows } else { vb.cols };
        let mut out = Matrix::zeros(m, n);
        gemm(va, ta, vb, tb, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, false, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols), vr.shape(), "add_row shape");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * sigmoid(x)).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Row-wise normalisation to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows);
        let n = vx.cols as f64;
        for r in 0..vx.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Row softmax. Columns where `keep` is false get exactly zero weight.
    pub fn softmax(&mut self, a: Var, keep: Option<&[bool]>) -> Var {
        let va = self.value(a);
        if let Some(k) = keep {
            assert_eq!(k.len(), va.cols, "softmax mask length");
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let allowed = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if allowed(j) && *v > max {
                    max = *v;
                }
            }
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if allowed(j) {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// `out[i] = src[index[i]]` over flattened storage; [`ZERO`] emits 0.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, index: Vec<usize>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let vs = self.value(src);
        let data = index
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { vs.data[i] })
            .collect();
        let out = Matrix::from_vec(rows, cols, data);
        let ng = self.ng(src);
        self.push(out, Op::Gather { src, index }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.rows, "slice_rows range");
        let out = Matrix::from_vec(len, vx.cols, vx.data[start * vx.cols..(start + len) * vx.cols].to_vec());
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols, "slice_cols range");
        let mut out = Matrix::zeros(vx.rows, len);
        for r in 0..vx.rows {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Mean squared error against a fixed target, as a `1×1` node.
    pub fn mse(&mut self, x: Var, target: Matrix) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), target.shape(), "mse shape");
        let n = vx.len().max(1) as f64;
        let s: f64 = vx.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let ng = self.ng(x);
        self.push(Matrix::from_vec(1, 1, vec![s / n]), Op::Mse { x, target }, ng)
    }

    /// Mean of several `1×1` nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, d: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    if *ta {
                        gemm(vb, *tb, g, true, &mut da, 0.0);
                    } else {
                        gemm(g, false, vb, !*tb, &mut da, 0.0);
                    }
                    acc(*a, da, grads);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(vb.rows, vb.cols);
                    if *tb {
                        gemm(g, true, va, *ta, &mut db, 0.0);
                    } else {
                        gemm(va, !*ta, g, false, &mut db, 0.0);
                    }
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.ng(*row) {
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*row, dr, grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s), grads),
            Op::Silu(a) => {
                let x = self.value(*a);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| {
                        let s = sigmoid(x);
                        gy * (s + x * s * (1.0 - s))
                    })
                    .collect();
                acc(*a, Matrix::from_vec(x.rows, x.cols, data), grads);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut dx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*a, dx, grads);
            }
            Op::Gather { src, index } => {
                let vs = self.value(*src);
                let mut ds = Matrix::zeros(vs.rows, vs.cols);
                for (&ix, &gv) in index.iter().zip(&g.data) {
                    if ix != ZERO {
                        ds.data[ix] += gv;
                    }
                }
                acc(*src, ds, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let d = Matrix::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec());
                        acc(p, d, grads);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let mut d = Matrix::zeros(r, c);
                        for row in 0..r {
                            d.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                        }
                        acc(p, d, grads);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let mut d = Matrix::zeros(vx.rows, vx.cols);
                d.data[start * vx.cols..start * vx.cols + g.len()].copy_from_slice(&g.data);
                acc(*x, d, grads);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut d = Matrix::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*x, d, grads);
            }
            Op::Mse { x, target } => {
                let vx = self.value(*x);
                let k = 2.0 * g.data[0] / vx.len().max(1) as f64;
                let data = vx.data.iter().zip(&target.data).map(|(a, b)| k * (a - b)).collect();
                acc(*x, Matrix::from_vec(vx.rows, vx.cols, data), grads);
            }
        }
    }

    /// Collects parameter gradients into a store-aligned buffer.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> GradStore {
        let mut out = GradStore::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                out.get_mut(id).add_assign(g);
            }
        }
        out
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a closure building a graph.
    fn check<F>(input: Matrix, build: F) -> f64
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.variable(input.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or(Matrix::zeros(input.rows, input.cols));
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data[i] += delta;
                let mut g = Graph::new();
                let x = g.variable(m);
                let out = build(&mut g, x);
                g.value(out).data[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(err);
        }
        worst
    }

    fn target(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_transposes_have_correct_gradients() {
        let x0 = target(3, 4, 1);
        let w = target(4, 5, 2);
        let wt = w.transpose();
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let err = check(if ta { x0.transpose() } else { x0.clone() }, |g, x| {
                let wv = g.constant(if tb { wt.clone() } else { w.clone() });
                let y = g.matmul_ext(x, ta, wv, tb);
                g.mse(y, target(3, 5, 3))
            });
            assert!(err < 1e-6, "ta={ta} tb={tb} err={err}");
        }
    }

    #[test]
    fn nonlinear_ops_have_correct_gradients() {
        let keep = [true, false, true, true];
        let err = check(target(3, 4, 4), |g, x| {
            let n = g.layer_norm(x);
            let s = g.silu(n);
            let p = g.softmax(s, Some(&keep));
            let b = g.constant(target(1, 4, 5));
            let q = g.add_row(p, b);
            let c = g.concat_cols(&[q, x]);
            let r = g.concat_rows(&[c, c]);
            let sl = g.slice_cols(r, 1, 5);
            let sr = g.slice_rows(sl, 2, 3);
            let gi = g.gather(sr, 2, 2, vec![0, ZERO, 7, 3]);
            let sc = g.scale(gi, 1.7);
            g.mse(sc, target(2, 2, 6))
        });
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn masked_softmax_assigns_exact_zero() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[vec![1.0, 50.0, -2.0]]));
        let p = g.softmax(x, Some(&[true, false, true]));
        let v = g.value(p);
        assert_eq!(v.data[1], 0.0);
        assert!((v.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_leaf_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![2.0]]));
        let mut g = Graph::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let y = g.add(w1, w2);
        let loss = g.mse(y, Matrix::zeros(1, 1));
        let grads = g.backward(loss);
        // d/dw (2w)^2 = 8w
        assert_eq!(g.param_grads(&grads, &store).get(id).data[0], 16.0);
    }
}
