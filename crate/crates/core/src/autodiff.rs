//! Reverse-mode automatic differentiation over a per-sample tape of dense
//! matrices.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is created, and [`Graph::backward`] walks the tape in reverse
//! accumulating vector-Jacobian products. Only nodes that transitively depend
//! on a gradient-carrying leaf take part in the backward pass.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2D convolution over a stack of images.
///
/// Images are stored as `(batch·h·w) × cin` matrices, row index
/// `(b·h + y)·w + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn im2col(&self, x: &Matrix) -> Matrix {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut cols = Matrix::zeros(self.batch * oh * ow, self.patch_len());
        let src = x.as_slice();
        let k = self.kernel;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    let dst = cols.row_mut(row);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let s = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let d = (ky * k + kx) * self.cin;
                            dst[d..d + self.cin].copy_from_slice(&src[s..s + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, dcols: &Matrix, dx: &mut Matrix) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let dst = dx.as_mut_slice();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = dcols.row((b * oh + oy) * ow + ox);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let d = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let s = (ky * k + kx) * self.cin;
                            for c in 0..self.cin {
                                dst[d + c] += src[s + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RowNorm(Var),
    RowSum(Var),
    MeanRows(Var),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Conv { x: Var, w: Var, geom: ConvGeom, cols: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A tape of eagerly evaluated matrix operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_cache: Vec<Option<Var>>,
}

#[inline]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for probing w.r.t. inputs).
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_cache.len() <= id.index() {
            self.param_cache.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_cache[id.index()] {
            return v;
        }
        let v = self.push(store.matrix(id), Op::Leaf, true);
        self.param_cache[id.index()] = Some(v);
        self.params.push((id, v));
        v
    }

    /// Like [`Graph::param`] but as a constant (for frozen parameters).
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.matrix(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = if ta { va.cols() } else { va.rows() };
        let n = if tb { vb.rows() } else { vb.cols() };
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, va, ta, vb, tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "add_row expects a 1 x cols row");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.as_slice()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "mul_row expects a 1 x cols row");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.as_slice()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.value(a).map(|x| alpha * x);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, alpha), ng)
    }

    /// `x · sigmoid(x)`: smooth, zero at zero.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Euclidean norm of each row, as a `rows × 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Matrix::from_fn(va.rows(), 1, |r, _| {
            va.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()
        });
        let ng = self.ng(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Sum of each row, as a `rows × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Matrix::from_fn(va.rows(), 1, |r, _| va.row(r).iter().sum());
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    /// Mean over rows, as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.rows() as f64;
        let mut out = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        out.scale(1.0 / n);
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.as_slice());
        }
        let out = Matrix::from_vec(rows, cols, data).expect("sized above");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { x: a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let out = Matrix::from_fn(va.rows(), len, |r, c| va[(r, start + c)]);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { x: a, start }, ng)
    }

    /// Row gather; indices may repeat (gradients scatter-add).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select_rows(&idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows { x: a, idx }, ng)
    }

    /// Convolution of `x: (batch·h·w) × cin` with `w: (k·k·cin) × cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        assert_eq!(
            vx.shape(),
            (geom.batch * geom.h * geom.w, geom.cin),
            "conv2d input shape"
        );
        assert_eq!(self.value(w).rows(), geom.patch_len(), "conv2d kernel shape");
        let cols = geom.im2col(vx);
        let out = cols.matmul(self.value(w));
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::Conv { x, w, geom, cols }, ng)
    }

    /// Runs the backward pass from a scalar `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Matrix>], v: Var) -> Option<&'a mut Matrix> {
        if !self.ng(v) {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(s) = self.slot(grads, a) {
                    if ta {
                        gemm(1.0, vb, tb, g, true, 1.0, s);
                    } else {
                        gemm(1.0, g, false, vb, !tb, 1.0, s);
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    if tb {
                        gemm(1.0, g, true, va, ta, 1.0, s);
                    } else {
                        gemm(1.0, va, !ta, g, false, 1.0, s);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    s.add_scaled(g, 1.0);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.add_scaled(g, 1.0);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    s.add_scaled(g, 1.0);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.add_scaled(g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(s) = self.slot(grads, a) {
                    for ((o, &gi), &y) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vb.as_slice()) {
                        *o += gi * y;
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for ((o, &gi), &x) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(va.as_slice()) {
                        *o += gi * x;
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(s) = self.slot(grads, a) {
                    s.add_scaled(g, 1.0);
                }
                if let Some(s) = self.slot(grads, row) {
                    for r in 0..g.rows() {
                        for (o, &gi) in s.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let (va, vr) = (self.value(a), self.value(row));
                if self.ng(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, &b) in ga.row_mut(r).iter_mut().zip(vr.as_slice()) {
                            *o *= b;
                        }
                    }
                    self.slot(grads, a).unwrap().add_scaled(&ga, 1.0);
                }
                if self.ng(row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, &gi), &x) in gr.as_mut_slice().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *o += gi * x;
                        }
                    }
                    self.slot(grads, row).unwrap().add_scaled(&gr, 1.0);
                }
            }
            &Op::Scale(a, alpha) => {
                if let Some(s) = self.slot(grads, a) {
                    s.add_scaled(g, alpha);
                }
            }
            &Op::Silu(a) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, g, x, |x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
            }
            &Op::Softplus(a) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, g, x, sigmoid);
            }
            &Op::Abs(a) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, g, x, |x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            &Op::Square(a) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, g, x, |x| 2.0 * x);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, a) {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, *x) {
                    let n = y.cols() as f64;
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &yi), &gi) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += inv_std[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
            }
            &Op::RowNorm(a) => {
                let x = self.value(a);
                let n = &node.value;
                if let Some(s) = self.slot(grads, a) {
                    for r in 0..x.rows() {
                        let len = n[(r, 0)];
                        if len == 0.0 {
                            continue;
                        }
                        let f = g[(r, 0)] / len;
                        for (o, &xi) in s.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o += f * xi;
                        }
                    }
                }
            }
            &Op::RowSum(a) => {
                if let Some(s) = self.slot(grads, a) {
                    for r in 0..s.rows() {
                        let gi = g[(r, 0)];
                        for o in s.row_mut(r) {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::MeanRows(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let inv = 1.0 / s.rows() as f64;
                    for r in 0..s.rows() {
                        for (o, &gi) in s.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *o += gi * inv;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                let gi = g.as_slice()[0];
                if let Some(s) = self.slot(grads, a) {
                    for o in s.as_mut_slice() {
                        *o += gi;
                    }
                }
            }
            &Op::Transpose(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.add_scaled(&g.transpose(), 1.0);
                }
            }
            &Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, a) {
                    for (o, &gi) in s.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        for (o, &gi) in s.as_mut_slice().iter_mut().zip(&g.as_slice()[off..off + len]) {
                            *o += gi;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if let Some(s) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            for (o, &gi) in s.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                                *o += gi;
                            }
                        }
                    }
                    off += cols;
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(s) = self.slot(grads, x) {
                    for r in 0..g.rows() {
                        for (o, &gi) in s.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(s) = self.slot(grads, x) {
                    for r in 0..g.rows() {
                        for (o, &gi) in s.row_mut(r)[start..].iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &gi) in s.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Conv { x, w, geom, cols } => {
                if let Some(s) = self.slot(grads, *w) {
                    gemm(1.0, cols, true, g, false, 1.0, s);
                }
                if self.ng(*x) {
                    let mut dcols = Matrix::zeros(cols.rows(), cols.cols());
                    gemm(1.0, g, false, self.value(*w), true, 0.0, &mut dcols);
                    let s = self.slot(grads, *x).unwrap();
                    geom.col2im_add(&dcols, s);
                }
            }
        }
    }

    fn acc_elementwise(
        &self,
        grads: &mut [Option<Matrix>],
        a: Var,
        g: &Matrix,
        x: &Matrix,
        deriv: impl Fn(f64) -> f64,
    ) {
        if let Some(s) = self.slot(grads, a) {
            for ((o, &gi), &xi) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                *o += gi * deriv(xi);
            }
        }
    }

    /// Parameters loaded on this tape, in load order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, or `None` if it received none.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adds this tape's parameter gradients into a flat buffer laid out like
    /// the store.
    pub fn accumulate_params(&self, graph: &Graph, store: &ParamStore, flat: &mut [f64]) {
        for &(id, v) in graph.params() {
            if let Some(g) = self.wrt(v) {
                let range = store.range(id);
                for (o, &gi) in flat[range].iter_mut().zip(g.as_slice()) {
                    *o += gi;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Checks d f / d inputs against central differences, where `f` builds a
    /// scalar from the given input leaves.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for k in 0..m.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, mm)| {
                            let mut mm = mm.clone();
                            if j == i {
                                mm.as_mut_slice()[k] += delta;
                            }
                            g.variable(mm)
                        })
                        .collect();
                    let o = f(&mut g, &vars);
                    g.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} elem {k}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Weighted sum with fixed weights so every output entry matters.
    fn probe(g: &mut Graph, v: Var) -> Var {
        let (r, c) = g.shape(v);
        let w = Matrix::from_fn(r, c, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.55);
        let w = g.constant(w);
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn matmul_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_m(&mut rng, 4, 3) } else { rand_m(&mut rng, 3, 4) };
            let b = if tb { rand_m(&mut rng, 2, 4) } else { rand_m(&mut rng, 4, 2) };
            check(vec![a, b], |g, v| {
                let m = g.matmul_t(v[0], ta, v[1], tb);
                probe(g, m)
            });
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_m(&mut rng, 3, 4);
        let b = rand_m(&mut rng, 3, 4);
        check(vec![a.clone(), b.clone()], |g, v| {
            let x = g.add(v[0], v[1]);
            let y = g.sub(x, v[1]);
            let z = g.mul(y, v[1]);
            let s = g.scale(z, 1.7);
            probe(g, s)
        });
        check(vec![a.clone()], |g, v| {
            let x = g.silu(v[0]);
            let y = g.softplus(x);
            let z = g.square(y);
            let w = g.abs(v[0]);
            let s = g.add(z, w);
            probe(g, s)
        });
    }

    #[test]
    fn row_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_m(&mut rng, 3, 4), rand_m(&mut rng, 1, 4)], |g, v| {
            let x = g.add_row(v[0], v[1]);
            let y = g.mul_row(x, v[1]);
            probe(g, y)
        });
    }

    #[test]
    fn softmax_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![rand_m(&mut rng, 3, 5)], |g, v| {
            let s = g.softmax(v[0]);
            probe(g, s)
        });
        check(vec![rand_m(&mut rng, 3, 5)], |g, v| {
            let s = g.layer_norm(v[0], 1e-5);
            probe(g, s)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(rand_m(&mut rng, 4, 6).map(|x| 30.0 * x));
        let s = g.softmax(x);
        for r in 0..4 {
            let row = g.value(s).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![rand_m(&mut rng, 4, 3)], |g, v| {
            let n = g.row_norm(v[0]);
            let s = g.row_sum(v[0]);
            let m = g.mean_rows(v[0]);
            let a = probe(g, n);
            let b = probe(g, s);
            let c = probe(g, m);
            let ab = g.add(a, b);
            let abc = g.add(ab, c);
            let mm = g.mean(v[0]);
            g.add(abc, mm)
        });
    }

    #[test]
    fn row_norm_of_zero_row_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::zeros(1, 3));
        let n = g.row_norm(x);
        let s = g.sum(n);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check(vec![rand_m(&mut rng, 3, 4), rand_m(&mut rng, 2, 4)], |g, v| {
            let c = g.concat_rows(&[v[0], v[1], v[0]]);
            let t = g.transpose(c);
            let r = g.reshape(t, 8, 4);
            let s = g.slice_rows(r, 2, 5);
            let sc = g.slice_cols(s, 1, 2);
            let gr = g.gather_rows(sc, vec![0, 0, 4, 2]);
            let cc = g.concat_cols(&[gr, gr]);
            probe(g, cc)
        });
    }

    #[test]
    fn conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let geom = ConvGeom {
            batch: 2,
            h: 5,
            w: 6,
            cin: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((geom.out_h(), geom.out_w()), (3, 3));
        check(
            vec![rand_m(&mut rng, 2 * 5 * 6, 2), rand_m(&mut rng, 18, 3)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], geom);
                probe(g, y)
            },
        );
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeom {
            batch: 1,
            h: 8,
            w: 8,
            cin: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = rand_m(&mut rng, 64, 3);
        let w = rand_m(&mut rng, 27, 4);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, geom);
        let y = g.value(y);
        for oy in 0..4 {
            for ox in 0..4 {
                for co in 0..4 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 8 || ix >= 8 {
                                continue;
                            }
                            for ci in 0..3 {
                                acc += x[((iy * 8 + ix) as usize, ci)] * w[((ky * 3 + kx) * 3 + ci, co)];
                            }
                        }
                    }
                    assert!((y[(oy * 4 + ox, co)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(2, 2, 1.0));
        let x = g.variable(Matrix::filled(2, 2, 2.0));
        let y = g.mul(c, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn params_deduplicate_and_accumulate() {
        let mut store = ParamStore::new();
        let _pad = store.zeros("pad", 1, 2);
        let id = store.add("w", Matrix::from_rows(&[[1.0, 2.0]]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        let mut flat = vec![0.0; store.len()];
        grads.accumulate_params(&g, &store, &mut flat);
        assert_eq!(flat, vec![0.0, 0.0, 2.0, 4.0]);
    }
}
