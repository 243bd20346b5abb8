//! Dense double-precision matrices with reverse-mode automatic differentiation.
//!
//! Every tensor is a 2D row-major matrix. Scalars are `(1, 1)` tensors and
//! vectors are single-row or single-column matrices. Each forward op records
//! the parents and a backward closure; calling [`Tensor::backward`] on a
//! scalar loss propagates gradients to every reachable leaf with
//! `requires_grad` set.
//!
//! Computation graphs are confined to a single thread (`Rc`, not `Arc`);
//! distinct training folds run on distinct threads with independent graphs.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rows with variance below this normalize to zeros in `layer_norm`.
pub const LAYER_NORM_VAR_GUARD: f64 = 1e-12;

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Inner {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense 2D matrix participating in a reverse-mode autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("rows", &inner.rows)
            .field("cols", &inner.cols)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            rows * cols,
            "tensor shape ({rows}, {cols}) does not match {} values",
            values.len()
        );
        Self::build(rows, cols, values, false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates gradients (a learnable parameter).
    pub fn param(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "parameter shape mismatch");
        Self::build(rows, cols, values, true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    fn build(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        let needs_grad = requires_grad || parents.iter().any(|p| p.inner.borrow().needs_grad);
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                rows,
                cols,
                values,
                grad: None,
                requires_grad,
                needs_grad,
                parents,
                backward: if needs_grad { backward } else { None },
            })),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.inner.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let i = self.inner.borrow();
        (i.rows, i.cols)
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn item(&self) -> f64 {
        let i = self.inner.borrow();
        assert_eq!(i.values.len(), 1, "item() on non-scalar tensor");
        i.values[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let i = self.inner.borrow();
        i.values[r * i.cols + c]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Gradient buffer of a leaf after `backward`, or zeros if untouched.
    pub fn grad(&self) -> Vec<f64> {
        let i = self.inner.borrow();
        i.grad
            .clone()
            .unwrap_or_else(|| vec![0.0; i.values.len()])
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite values in place (optimizer updates). Leaves only.
    pub fn set_values(&self, values: &[f64]) {
        let mut i = self.inner.borrow_mut();
        assert_eq!(i.values.len(), values.len(), "set_values length mismatch");
        i.values.copy_from_slice(values);
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().values.iter().all(|v| v.is_finite())
    }

    /// A constant copy cut off from the graph (stop-gradient).
    pub fn detach(&self) -> Tensor {
        let i = self.inner.borrow();
        Tensor::new(i.rows, i.cols, i.values.clone())
    }

    fn accumulate(&self, g: &[f64]) {
        let mut i = self.inner.borrow_mut();
        if !i.needs_grad {
            return;
        }
        match &mut i.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => i.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss.
    pub fn backward(&self) {
        {
            let i = self.inner.borrow();
            assert_eq!(i.values.len(), 1, "backward requires a scalar loss");
        }
        // Deterministic post-order over the graph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner) as usize;
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            let parents = node.inner.borrow().parents.clone();
            stack.push((node, true));
            for p in parents.into_iter().rev() {
                if p.inner.borrow().needs_grad {
                    stack.push((p, false));
                }
            }
        }
        self.inner.borrow_mut().grad = Some(vec![1.0]);
        for node in order.iter().rev() {
            let inner = node.inner.borrow();
            if let (Some(f), Some(g)) = (&inner.backward, &inner.grad) {
                f(g, &inner.parents);
            }
        }
    }

    // ---- elementwise binary ops ----

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let (r, c) = self.shape();
        let out: Vec<f64> = self
            .inner
            .borrow()
            .values
            .iter()
            .zip(other.inner.borrow().values.iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, ps| {
                ps[0].accumulate(g);
                ps[1].accumulate(g);
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let (r, c) = self.shape();
        let out: Vec<f64> = self
            .inner
            .borrow()
            .values
            .iter()
            .zip(other.inner.borrow().values.iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, ps| {
                ps[0].accumulate(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                ps[1].accumulate(&neg);
            })),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let (r, c) = self.shape();
        let a = self.values();
        let b = other.values();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, ps| {
                let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(v, y)| v * y).collect();
                let gb: Vec<f64> = g.iter().zip(a.iter()).map(|(v, x)| v * x).collect();
                ps[0].accumulate(&ga);
                ps[1].accumulate(&gb);
            })),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "div");
        let (r, c) = self.shape();
        let a = self.values();
        let b = other.values();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x / y).collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, ps| {
                let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(v, y)| v / y).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(v, (x, y))| -v * x / (y * y))
                    .collect();
                ps[0].accumulate(&ga);
                ps[1].accumulate(&gb);
            })),
        )
    }

    // ---- scalar ops ----

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let (r, c) = self.shape();
        let out: Vec<f64> = self.inner.borrow().values.iter().map(|v| v + s).collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(|g, ps| ps[0].accumulate(g))),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let (r, c) = self.shape();
        let out: Vec<f64> = self.inner.borrow().values.iter().map(|v| v * s).collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp: Vec<f64> = g.iter().map(|v| v * s).collect();
                ps[0].accumulate(&gp);
            })),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    // ---- unary elementwise ----

    pub fn relu(&self) -> Tensor {
        let (r, c) = self.shape();
        let a = self.values();
        let out: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp: Vec<f64> = g
                    .iter()
                    .zip(a.iter())
                    .map(|(v, x)| if *x > 0.0 { *v } else { 0.0 })
                    .collect();
                ps[0].accumulate(&gp);
            })),
        )
    }

    /// GELU in the tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let (r, c) = self.shape();
        let a = self.values();
        let out: Vec<f64> = a
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (K * (x + C3 * x * x * x)).tanh()))
            .collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp: Vec<f64> = g
                    .iter()
                    .zip(a.iter())
                    .map(|(v, &x)| {
                        let u = K * (x + C3 * x * x * x);
                        let t = u.tanh();
                        let du = K * (1.0 + 3.0 * C3 * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        v * d
                    })
                    .collect();
                ps[0].accumulate(&gp);
            })),
        )
    }

    pub fn exp(&self) -> Tensor {
        let (r, c) = self.shape();
        let out: Vec<f64> = self.inner.borrow().values.iter().map(|v| v.exp()).collect();
        let saved = out.clone();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp: Vec<f64> = g.iter().zip(saved.iter()).map(|(v, y)| v * y).collect();
                ps[0].accumulate(&gp);
            })),
        )
    }

    /// Natural log. Panics on non-positive input (fatal numeric error).
    pub fn log(&self) -> Tensor {
        let (r, c) = self.shape();
        let a = self.values();
        assert!(
            a.iter().all(|v| *v > 0.0),
            "log of non-positive value"
        );
        let out: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        Tensor::build(
            r,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp: Vec<f64> = g.iter().zip(a.iter()).map(|(v, x)| v / x).collect();
                ps[0].accumulate(&gp);
            })),
        )
    }

    // ---- matmul / transpose ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let a = self.values();
        let b = other.values();
        let out = matmul_raw(&a, &b, m, k, n);
        let (a_saved, b_saved) = (a, b);
        Tensor::build(
            m,
            n,
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, ps| {
                // dA = G B^T, dB = A^T G
                let bt = transpose_raw(&b_saved, k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                ps[0].accumulate(&ga);
                let at = transpose_raw(&a_saved, m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                ps[1].accumulate(&gb);
            })),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let out = transpose_raw(&self.inner.borrow().values, r, c);
        Tensor::build(
            c,
            r,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp = transpose_raw(g, c, r);
                ps[0].accumulate(&gp);
            })),
        )
    }

    // ---- broadcasting helpers ----

    /// Add a (1, C) row vector to every row of an (N, C) matrix.
    pub fn add_bcast_row(&self, row: &Tensor) -> Tensor {
        let (n, c) = self.shape();
        assert_eq!(row.shape(), (1, c), "add_bcast_row: expected (1, {c})");
        let b = row.values();
        let out: Vec<f64> = self
            .inner
            .borrow()
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone(), row.clone()],
            Some(Box::new(move |g, ps| {
                ps[0].accumulate(g);
                let mut gr = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    gr[i % c] += v;
                }
                ps[1].accumulate(&gr);
            })),
        )
    }

    /// Subtract an (N, 1) column vector from every column of an (N, C) matrix.
    pub fn sub_bcast_col(&self, col: &Tensor) -> Tensor {
        let (n, c) = self.shape();
        assert_eq!(col.shape(), (n, 1), "sub_bcast_col: expected ({n}, 1)");
        let b = col.values();
        let out: Vec<f64> = self
            .inner
            .borrow()
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v - b[i / c])
            .collect();
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone(), col.clone()],
            Some(Box::new(move |g, ps| {
                ps[0].accumulate(g);
                let mut gc = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gc[i / c] -= v;
                }
                ps[1].accumulate(&gc);
            })),
        )
    }

    /// Multiply each row i of an (N, C) matrix by col[i] of an (N, 1) vector.
    pub fn mul_bcast_col(&self, col: &Tensor) -> Tensor {
        let (n, c) = self.shape();
        assert_eq!(col.shape(), (n, 1), "mul_bcast_col: expected ({n}, 1)");
        let a = self.values();
        let b = col.values();
        let out: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, v)| v * b[i / c])
            .collect();
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone(), col.clone()],
            Some(Box::new(move |g, ps| {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * b[i / c])
                    .collect();
                ps[0].accumulate(&ga);
                let mut gc = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gc[i / c] += v * a[i];
                }
                ps[1].accumulate(&gc);
            })),
        )
    }

    /// Divide each row i of an (N, C) matrix by col[i] of an (N, 1) vector.
    pub fn div_bcast_col(&self, col: &Tensor) -> Tensor {
        let (n, c) = self.shape();
        assert_eq!(col.shape(), (n, 1), "div_bcast_col: expected ({n}, 1)");
        let a = self.values();
        let b = col.values();
        let out: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, v)| v / b[i / c])
            .collect();
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone(), col.clone()],
            Some(Box::new(move |g, ps| {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v / b[i / c])
                    .collect();
                ps[0].accumulate(&ga);
                let mut gc = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    let d = b[i / c];
                    gc[i / c] -= v * a[i] / (d * d);
                }
                ps[1].accumulate(&gc);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let (r, c) = self.shape();
        let s: f64 = self.inner.borrow().values.iter().sum();
        Tensor::build(
            1,
            1,
            vec![s],
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                ps[0].accumulate(&vec![g[0]; r * c]);
            })),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let (r, c) = self.shape();
        self.sum_all().mul_scalar(1.0 / (r * c) as f64)
    }

    /// Sum over an axis: axis 0 collapses rows -> (1, C); axis 1 -> (N, 1).
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (n, c) = self.shape();
        let a = self.inner.borrow().values.clone();
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        out[j] += a[i * c + j];
                    }
                }
                Tensor::build(
                    1,
                    c,
                    out,
                    false,
                    vec![self.clone()],
                    Some(Box::new(move |g, ps| {
                        let mut gp = vec![0.0; n * c];
                        for i in 0..n {
                            gp[i * c..(i + 1) * c].copy_from_slice(g);
                        }
                        ps[0].accumulate(&gp);
                    })),
                )
            }
            1 => {
                let mut out = vec![0.0; n];
                for i in 0..n {
                    for j in 0..c {
                        out[i] += a[i * c + j];
                    }
                }
                Tensor::build(
                    n,
                    1,
                    out,
                    false,
                    vec![self.clone()],
                    Some(Box::new(move |g, ps| {
                        let mut gp = vec![0.0; n * c];
                        for i in 0..n {
                            for j in 0..c {
                                gp[i * c + j] = g[i];
                            }
                        }
                        ps[0].accumulate(&gp);
                    })),
                )
            }
            _ => panic!("sum_axis: axis must be 0 or 1"),
        }
    }

    /// Per-row maximum as an (N, 1) tensor. Gradient routes to the first argmax.
    pub fn row_max(&self) -> Tensor {
        self.row_extreme(true)
    }

    /// Per-row minimum as an (N, 1) tensor. Gradient routes to the first argmin.
    pub fn row_min(&self) -> Tensor {
        self.row_extreme(false)
    }

    fn row_extreme(&self, max: bool) -> Tensor {
        let (n, c) = self.shape();
        assert!(c > 0);
        let a = self.inner.borrow().values.clone();
        let mut out = vec![0.0; n];
        let mut arg = vec![0usize; n];
        for i in 0..n {
            let row = &a[i * c..(i + 1) * c];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if (max && v > bv) || (!max && v < bv) {
                    bi = j;
                    bv = v;
                }
            }
            out[i] = bv;
            arg[i] = bi;
        }
        Tensor::build(
            n,
            1,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    gp[i * c + arg[i]] = g[i];
                }
                ps[0].accumulate(&gp);
            })),
        )
    }

    // ---- structured ops ----

    /// Numerically stable softmax over each row (max-shifted).
    pub fn row_softmax(&self) -> Tensor {
        let (n, c) = self.shape();
        let a = self.inner.borrow().values.clone();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &a[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let y = out.clone();
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(yj, gj)| yj * gj).sum();
                    for j in 0..c {
                        gp[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                ps[0].accumulate(&gp);
            })),
        )
    }

    /// Log of the row softmax, fused for stability on extreme inputs.
    pub fn row_log_softmax(&self) -> Tensor {
        let (n, c) = self.shape();
        let a = self.inner.borrow().values.clone();
        let mut out = vec![0.0; n * c];
        let mut probs = vec![0.0; n * c];
        for i in 0..n {
            let row = &a[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        gp[i * c + j] = gr[j] - probs[i * c + j] * s;
                    }
                }
                ps[0].accumulate(&gp);
            })),
        )
    }

    /// Per-row layer normalization with learnable scale and shift (each (1, C)).
    ///
    /// Rows with variance below [`LAYER_NORM_VAR_GUARD`] normalize to zeros;
    /// their gradient contribution to the input is dropped in the same branch.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (n, c) = self.shape();
        assert_eq!(gamma.shape(), (1, c), "layer_norm: gamma shape");
        assert_eq!(beta.shape(), (1, c), "layer_norm: beta shape");
        let a = self.values();
        let gm = gamma.values();
        let bt = beta.values();
        let mut out = vec![0.0; n * c];
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut live = vec![true; n];
        for i in 0..n {
            let row = &a[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            if var < LAYER_NORM_VAR_GUARD {
                live[i] = false;
                for j in 0..c {
                    xhat[i * c + j] = 0.0;
                    out[i * c + j] = bt[j]; // gamma * 0 + beta
                }
                continue;
            }
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                out[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g, ps| {
                let mut gx = vec![0.0; n * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        ggamma[j] += g[i * c + j] * xhat[i * c + j];
                        gbeta[j] += g[i * c + j];
                    }
                    if !live[i] {
                        continue;
                    }
                    // dL/dxhat_j = g_j * gamma_j; standard layer-norm backward
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i * c + j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gm[j];
                        gx[i * c + j] = inv_std[i]
                            * (dxh - sum_dxh / cf - xhat[i * c + j] * sum_dxh_xh / cf);
                    }
                }
                ps[0].accumulate(&gx);
                ps[1].accumulate(&ggamma);
                ps[2].accumulate(&gbeta);
            })),
        )
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if !training || rate == 0.0 {
            return self.identity();
        }
        let (n, c) = self.shape();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n * c)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let a = self.values();
        let out: Vec<f64> = a.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        Tensor::build(
            n,
            c,
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let gp: Vec<f64> = g.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
                ps[0].accumulate(&gp);
            })),
        )
    }

    fn identity(&self) -> Tensor {
        let (r, c) = self.shape();
        Tensor::build(
            r,
            c,
            self.values(),
            false,
            vec![self.clone()],
            Some(Box::new(|g, ps| ps[0].accumulate(g))),
        )
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = parts[0].cols();
        let mut values = Vec::new();
        let mut row_counts = Vec::new();
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows: column mismatch");
            row_counts.push(p.rows());
            values.extend_from_slice(&p.inner.borrow().values);
        }
        let n: usize = row_counts.iter().sum();
        Tensor::build(
            n,
            c,
            values,
            false,
            parts.to_vec(),
            Some(Box::new(move |g, ps| {
                let mut off = 0;
                for (p, &rc) in ps.iter().zip(row_counts.iter()) {
                    p.accumulate(&g[off..off + rc * c]);
                    off += rc * c;
                }
            })),
        )
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = parts[0].rows();
        let col_counts: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows(), n, "concat_cols: row mismatch");
                p.cols()
            })
            .collect();
        let c: usize = col_counts.iter().sum();
        let mut values = vec![0.0; n * c];
        let mut off = 0;
        for (p, &cc) in parts.iter().zip(col_counts.iter()) {
            let pv = p.inner.borrow();
            for i in 0..n {
                values[i * c + off..i * c + off + cc]
                    .copy_from_slice(&pv.values[i * cc..(i + 1) * cc]);
            }
            off += cc;
        }
        Tensor::build(
            n,
            c,
            values,
            false,
            parts.to_vec(),
            Some(Box::new(move |g, ps| {
                let mut off = 0;
                for (p, &cc) in ps.iter().zip(col_counts.iter()) {
                    let mut gp = vec![0.0; n * cc];
                    for i in 0..n {
                        gp[i * cc..(i + 1) * cc]
                            .copy_from_slice(&g[i * c + off..i * c + off + cc]);
                    }
                    p.accumulate(&gp);
                    off += cc;
                }
            })),
        )
    }

    /// Contiguous row slice `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (n, c) = self.shape();
        assert!(start + len <= n, "slice_rows out of bounds");
        let values = self.inner.borrow().values[start * c..(start + len) * c].to_vec();
        Tensor::build(
            len,
            c,
            values,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let mut gp = vec![0.0; n * c];
                gp[start * c..(start + len) * c].copy_from_slice(g);
                ps[0].accumulate(&gp);
            })),
        )
    }

    /// Contiguous column slice `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (n, c) = self.shape();
        assert!(start + len <= c, "slice_cols out of bounds");
        let src = self.inner.borrow().values.clone();
        let mut values = vec![0.0; n * len];
        for i in 0..n {
            values[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Tensor::build(
            n,
            len,
            values,
            false,
            vec![self.clone()],
            Some(Box::new(move |g, ps| {
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    gp[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                ps[0].accumulate(&gp);
            })),
        )
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
