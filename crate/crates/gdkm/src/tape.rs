//! Reverse-mode gradient engine over a closed set of matrix primitives.
//!
//! The DKM objectives are built as expression tapes of dense matrix ops
//! (multiplies, Cholesky, triangular solves, elementwise kernel maps,
//! traces, log-diagonal sums, softmax cross-entropy). Each primitive
//! carries a hand-derived adjoint; [`Tape::backward`] runs the reverse
//! sweep from a scalar root. Sparse adjacencies enter only as constants.
//!
//! Convention: `cholesky` and the triangular solves read only the lower
//! triangle of their factor argument, and their adjoints are supported on
//! that triangle. This makes every adjoint checkable by finite differences
//! along arbitrary (not just symmetric) directions.

use crate::graphops::CsrMatrix;
use crate::kernels::{arccos_entry, arccos_entry_with_partials};
use crate::numerics::{
    cholesky_raw, solve_lower_left, solve_lower_right, solve_lower_trans_left,
    solve_lower_trans_right, Mat,
};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("cholesky failed at every jitter level (pivot {pivot:.3e} at row {row})")]
    FactorizationFailed { row: usize, pivot: f64 },
    #[error("non-positive diagonal entry {value:.3e} at row {row} in log-diagonal sum")]
    NonPositiveDiagonal { row: usize, value: f64 },
    #[error("gradient is not finite for parameter {index}")]
    NonFiniteGradient { index: usize },
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    // the added constant does not enter the adjoint
    AddConst(Var),
    AddScaledIdentity(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Cholesky(Var),
    SolveLowerLeft {
        h: Var,
        b: Var,
    },
    SolveLowerTransRight {
        h: Var,
        b: Var,
    },
    ArccosFull(Var),
    ArccosCross {
        g: Var,
        diag_rows: Var,
        diag_cols: Var,
    },
    DiagOf(Var),
    RowSquaredNorms(Var),
    SpmmLeft {
        at: Rc<CsrMatrix>,
        x: Var,
    },
    SpmmRightT {
        x: Var,
        a: Rc<CsrMatrix>,
    },
    TrilMask(Var),
    CenterRows(Var),
    DoubleCenter(Var),
    ScalarMulMat {
        s: Var,
        m: Var,
    },
    Dot(Var, Var),
    Trace(Var),
    SumLogDiag(Var),
    SoftmaxCrossEntropySum {
        logits: Var,
        rows: Rc<Vec<usize>>,
        labels: Rc<Vec<usize>>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    trainable: bool,
}

/// Expression tape; rebuilt for every objective evaluation.
pub struct Tape {
    nodes: Vec<Node>,
}

fn tril(m: &Mat) -> Mat {
    let (r, c) = m.dim();
    let mut out = m.clone();
    for i in 0..r {
        for j in (i + 1)..c {
            out[[i, j]] = 0.0;
        }
    }
    out
}

fn scalar(v: f64) -> Mat {
    Mat::from_elem((1, 1), v)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable,
        });
        Var(self.nodes.len() - 1)
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

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(scalar(value))
    }

    /// Trainable leaf; [`Gradients::get`] reports its gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b), false)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * &self.nodes[a.0].value;
        self.push(v, Op::Scale(a, c), false)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddConst(a), false)
    }

    pub fn add_scaled_identity(&mut self, a: Var, c: f64) -> Var {
        let n = self.nodes[a.0].value.nrows();
        let v = &self.nodes[a.0].value + &(c * Mat::eye(n));
        self.push(v, Op::AddScaledIdentity(a), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b), false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let (r, c) = src.dim();
        let mut v = Mat::zeros((c, r));
        for i in 0..r {
            for j in 0..c {
                v[[j, i]] = src[[i, j]];
            }
        }
        self.push(v, Op::Transpose(a), false)
    }

    /// Lower Cholesky factor of a symmetric matrix, climbing the jitter
    /// ladder (absolute levels scaled by the mean diagonal) until a level
    /// succeeds. Only the lower triangle of the input is read.
    pub fn cholesky(&mut self, a: Var, jitter_multipliers: &[f64]) -> Result<Var> {
        let am = &self.nodes[a.0].value;
        let n = am.nrows();
        let mean_diag = (0..n).map(|i| am[[i, i]]).sum::<f64>() / n.max(1) as f64;
        let scale_j = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut last = (0usize, f64::NAN);
        for &m in jitter_multipliers {
            match cholesky_raw(am, m * scale_j) {
                Ok(h) => return Ok(self.push(h, Op::Cholesky(a), false)),
                Err(fail) => last = fail,
            }
        }
        Err(TapeError::FactorizationFailed {
            row: last.0,
            pivot: last.1,
        })
    }

    /// `h^-1 b` for a lower-triangular `h`.
    pub fn solve_lower_left(&mut self, h: Var, b: Var) -> Var {
        let v = solve_lower_left(&self.nodes[h.0].value, &self.nodes[b.0].value);
        self.push(v, Op::SolveLowerLeft { h, b }, false)
    }

    /// `b h^-T` for a lower-triangular `h`.
    pub fn solve_lower_trans_right(&mut self, h: Var, b: Var) -> Var {
        let v = solve_lower_trans_right(&self.nodes[b.0].value, &self.nodes[h.0].value);
        self.push(v, Op::SolveLowerTransRight { h, b }, false)
    }

    /// Arccosine kernel of a full Gram matrix (diagonal taken from the input).
    pub fn arccos_full(&mut self, g: Var) -> Var {
        let gm = &self.nodes[g.0].value;
        let n = gm.nrows();
        let mut out = Mat::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] = arccos_entry(gm[[i, j]], gm[[i, i]], gm[[j, j]]);
            }
        }
        self.push(out, Op::ArccosFull(g), false)
    }

    /// Arccosine kernel of a cross block, with the row/column diagonals
    /// supplied as column vectors.
    pub fn arccos_cross(&mut self, g: Var, diag_rows: Var, diag_cols: Var) -> Var {
        let gm = &self.nodes[g.0].value;
        let dr = &self.nodes[diag_rows.0].value;
        let dc = &self.nodes[diag_cols.0].value;
        let (rows, cols) = gm.dim();
        debug_assert_eq!(dr.nrows(), rows);
        debug_assert_eq!(dc.nrows(), cols);
        let mut out = Mat::zeros((rows, cols));
        for u in 0..rows {
            for j in 0..cols {
                out[[u, j]] = arccos_entry(gm[[u, j]], dr[[u, 0]], dc[[j, 0]]);
            }
        }
        self.push(
            out,
            Op::ArccosCross {
                g,
                diag_rows,
                diag_cols,
            },
            false,
        )
    }

    /// Diagonal of a square matrix as an n x 1 column.
    pub fn diag_of(&mut self, a: Var) -> Var {
        let am = &self.nodes[a.0].value;
        let n = am.nrows();
        let mut out = Mat::zeros((n, 1));
        for i in 0..n {
            out[[i, 0]] = am[[i, i]];
        }
        self.push(out, Op::DiagOf(a), false)
    }

    /// Row-wise squared norms `diag(F F^T)` as an n x 1 column.
    pub fn row_squared_norms(&mut self, f: Var) -> Var {
        let fm = &self.nodes[f.0].value;
        let (rows, cols) = fm.dim();
        let mut out = Mat::zeros((rows, 1));
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += fm[[i, j]] * fm[[i, j]];
            }
            out[[i, 0]] = acc;
        }
        self.push(out, Op::RowSquaredNorms(f), false)
    }

    /// `a * x` with a constant sparse operator (`at` must be its transpose).
    pub fn spmm_left(&mut self, a: Rc<CsrMatrix>, at: Rc<CsrMatrix>, x: Var) -> Var {
        let v = a.matmul_dense(&self.nodes[x.0].value);
        self.push(v, Op::SpmmLeft { at, x }, false)
    }

    /// `x * a^T` with a constant sparse operator.
    pub fn spmm_right_t(&mut self, x: Var, a: Rc<CsrMatrix>) -> Var {
        let v = a.matmul_dense_left_transposed(&self.nodes[x.0].value);
        self.push(v, Op::SpmmRightT { x, a }, false)
    }

    /// Zeroes the strict upper triangle (used to restrict parameters to
    /// lower-triangular support).
    pub fn tril_mask(&mut self, a: Var) -> Var {
        let v = tril(&self.nodes[a.0].value);
        self.push(v, Op::TrilMask(a), false)
    }

    /// Subtracts the per-column mean over rows (feature centering).
    pub fn center_rows(&mut self, a: Var) -> Var {
        let v = crate::kernels::center_rows(&self.nodes[a.0].value);
        self.push(v, Op::CenterRows(a), false)
    }

    /// Double centering `C K C` with `C = I - ones/n` on each side.
    pub fn double_center(&mut self, a: Var) -> Var {
        let v = crate::kernels::double_center(&self.nodes[a.0].value);
        self.push(v, Op::DoubleCenter(a), false)
    }

    /// Scales a matrix by a 1x1 scalar node.
    pub fn scalar_mul_mat(&mut self, s: Var, m: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = sv * &self.nodes[m.0].value;
        self.push(v, Op::ScalarMulMat { s, m }, false)
    }

    /// Frobenius inner product `sum_ij a_ij b_ij` as a 1x1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let am = &self.nodes[a.0].value;
        let bm = &self.nodes[b.0].value;
        debug_assert_eq!(am.dim(), bm.dim());
        let v: f64 = am.iter().zip(bm.iter()).map(|(x, y)| x * y).sum();
        self.push(scalar(v), Op::Dot(a, b), false)
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let am = &self.nodes[a.0].value;
        let v: f64 = (0..am.nrows().min(am.ncols())).map(|i| am[[i, i]]).sum();
        self.push(scalar(v), Op::Trace(a), false)
    }

    /// `sum_i log a_ii`; fails on a non-positive diagonal.
    pub fn sum_log_diag(&mut self, a: Var) -> Result<Var> {
        let am = &self.nodes[a.0].value;
        let mut acc = 0.0;
        for i in 0..am.nrows() {
            let d = am[[i, i]];
            if d <= 0.0 || d.is_nan() {
                return Err(TapeError::NonPositiveDiagonal { row: i, value: d });
            }
            acc += d.ln();
        }
        Ok(self.push(scalar(acc), Op::SumLogDiag(a), false))
    }

    /// `sum_k log softmax(logits[rows[k], :])[labels[k]]` as a 1x1 node.
    pub fn softmax_cross_entropy_sum(
        &mut self,
        logits: Var,
        rows: Rc<Vec<usize>>,
        labels: Rc<Vec<usize>>,
    ) -> Var {
        debug_assert_eq!(rows.len(), labels.len());
        let lm = &self.nodes[logits.0].value;
        let mut acc = 0.0;
        for (&r, &y) in rows.iter().zip(labels.iter()) {
            let row = lm.row(r);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            acc += lm[[r, y]] - lse;
        }
        self.push(
            scalar(acc),
            Op::SoftmaxCrossEntropySum {
                logits,
                rows,
                labels,
            },
            false,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node;
    /// only reachable nodes have gradients.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        debug_assert_eq!(self.nodes[root.0].value.dim(), (1, 1));
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(gbar) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gbar, &mut grads);
            grads[idx] = Some(gbar);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if let Some(g) = &grads[i] {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TapeError::NonFiniteGradient { index: i });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, gbar: &Mat, grads: &mut [Option<Mat>]) {
        let add_to = |grads: &mut [Option<Mat>], v: Var, contrib: Mat| match &mut grads[v.0] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, gbar.clone());
                add_to(grads, *b, gbar.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, gbar.clone());
                add_to(grads, *b, -gbar);
            }
            Op::Scale(a, c) => add_to(grads, *a, *c * gbar),
            Op::AddConst(a) => add_to(grads, *a, gbar.clone()),
            Op::AddScaledIdentity(a) => add_to(grads, *a, gbar.clone()),
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                add_to(grads, *a, gbar.dot(&bv.t()));
                add_to(grads, *b, av.t().dot(gbar));
            }
            Op::Transpose(a) => {
                let (r, c) = gbar.dim();
                let mut g = Mat::zeros((c, r));
                for i in 0..r {
                    for j in 0..c {
                        g[[j, i]] = gbar[[i, j]];
                    }
                }
                add_to(grads, *a, g);
            }
            Op::Cholesky(a) => {
                let h = &self.nodes[idx].value;
                let hbar = tril(gbar);
                let m = h.t().dot(&hbar);
                // Phi: lower triangle with halved diagonal
                let n = h.nrows();
                let mut phi = Mat::zeros((n, n));
                for i in 0..n {
                    for j in 0..i {
                        phi[[i, j]] = m[[i, j]];
                    }
                    phi[[i, i]] = 0.5 * m[[i, i]];
                }
                let t1 = solve_lower_trans_left(h, &phi);
                let s = solve_lower_right(&t1, h);
                // adjoint for the reads-lower-triangle convention
                let mut abar = Mat::zeros((n, n));
                for i in 0..n {
                    for j in 0..i {
                        abar[[i, j]] = s[[i, j]] + s[[j, i]];
                    }
                    abar[[i, i]] = s[[i, i]];
                }
                add_to(grads, *a, abar);
            }
            Op::SolveLowerLeft { h, b } => {
                let hv = &self.nodes[h.0].value;
                let x = &self.nodes[idx].value;
                let bbar = solve_lower_trans_left(hv, gbar);
                let hbar = -tril(&bbar.dot(&x.t()));
                add_to(grads, *b, bbar);
                add_to(grads, *h, hbar);
            }
            Op::SolveLowerTransRight { h, b } => {
                let hv = &self.nodes[h.0].value;
                let x = &self.nodes[idx].value;
                let bbar = solve_lower_right(gbar, hv);
                let hbar = -tril(&bbar.t().dot(x));
                add_to(grads, *b, bbar);
                add_to(grads, *h, hbar);
            }
            Op::ArccosFull(g) => {
                let gv = &self.nodes[g.0].value;
                let n = gv.nrows();
                let mut gb = Mat::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        let up = gbar[[i, j]];
                        if up == 0.0 {
                            continue;
                        }
                        let (_, dkdg, dkdi, dkdj) =
                            arccos_entry_with_partials(gv[[i, j]], gv[[i, i]], gv[[j, j]]);
                        gb[[i, j]] += up * dkdg;
                        gb[[i, i]] += up * dkdi;
                        gb[[j, j]] += up * dkdj;
                    }
                }
                add_to(grads, *g, gb);
            }
            Op::ArccosCross {
                g,
                diag_rows,
                diag_cols,
            } => {
                let gv = &self.nodes[g.0].value;
                let dr = &self.nodes[diag_rows.0].value;
                let dc = &self.nodes[diag_cols.0].value;
                let (rows, cols) = gv.dim();
                let mut gb = Mat::zeros((rows, cols));
                let mut drb = Mat::zeros((rows, 1));
                let mut dcb = Mat::zeros((cols, 1));
                for u in 0..rows {
                    for j in 0..cols {
                        let up = gbar[[u, j]];
                        if up == 0.0 {
                            continue;
                        }
                        let (_, dkdg, dkdu, dkdj) =
                            arccos_entry_with_partials(gv[[u, j]], dr[[u, 0]], dc[[j, 0]]);
                        gb[[u, j]] += up * dkdg;
                        drb[[u, 0]] += up * dkdu;
                        dcb[[j, 0]] += up * dkdj;
                    }
                }
                add_to(grads, *g, gb);
                add_to(grads, *diag_rows, drb);
                add_to(grads, *diag_cols, dcb);
            }
            Op::DiagOf(a) => {
                let n = self.nodes[a.0].value.nrows();
                let mut ab = Mat::zeros((n, n));
                for i in 0..n {
                    ab[[i, i]] = gbar[[i, 0]];
                }
                add_to(grads, *a, ab);
            }
            Op::RowSquaredNorms(f) => {
                let fv = &self.nodes[f.0].value;
                let (rows, cols) = fv.dim();
                let mut fb = Mat::zeros((rows, cols));
                for i in 0..rows {
                    let c = 2.0 * gbar[[i, 0]];
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..cols {
                        fb[[i, j]] = c * fv[[i, j]];
                    }
                }
                add_to(grads, *f, fb);
            }
            Op::SpmmLeft { at, x } => {
                add_to(grads, *x, at.matmul_dense(gbar));
            }
            Op::SpmmRightT { x, a } => {
                add_to(grads, *x, a.matmul_dense_left(gbar));
            }
            Op::TrilMask(a) => add_to(grads, *a, tril(gbar)),
            Op::CenterRows(a) => add_to(grads, *a, crate::kernels::center_rows(gbar)),
            Op::DoubleCenter(a) => add_to(grads, *a, crate::kernels::double_center(gbar)),
            Op::ScalarMulMat { s, m } => {
                let sv = self.nodes[s.0].value[[0, 0]];
                let mv = &self.nodes[m.0].value;
                let sdot: f64 = gbar.iter().zip(mv.iter()).map(|(x, y)| x * y).sum();
                add_to(grads, *s, scalar(sdot));
                add_to(grads, *m, sv * gbar);
            }
            Op::Dot(a, b) => {
                let c = gbar[[0, 0]];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                add_to(grads, *a, c * bv);
                add_to(grads, *b, c * av);
            }
            Op::Trace(a) => {
                let c = gbar[[0, 0]];
                let (r, cdim) = self.nodes[a.0].value.dim();
                let mut ab = Mat::zeros((r, cdim));
                for i in 0..r.min(cdim) {
                    ab[[i, i]] = c;
                }
                add_to(grads, *a, ab);
            }
            Op::SumLogDiag(a) => {
                let c = gbar[[0, 0]];
                let av = &self.nodes[a.0].value;
                let (r, cdim) = av.dim();
                let mut ab = Mat::zeros((r, cdim));
                for i in 0..r.min(cdim) {
                    ab[[i, i]] = c / av[[i, i]];
                }
                add_to(grads, *a, ab);
            }
            Op::SoftmaxCrossEntropySum {
                logits,
                rows,
                labels,
            } => {
                let c = gbar[[0, 0]];
                let lv = &self.nodes[logits.0].value;
                let (r, classes) = lv.dim();
                let mut lb = Mat::zeros((r, classes));
                for (&row, &y) in rows.iter().zip(labels.iter()) {
                    let lrow = lv.row(row);
                    let maxv = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps: Vec<f64> = lrow.iter().map(|v| (v - maxv).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for e in exps.iter_mut() {
                        *e /= z;
                    }
                    for k in 0..classes {
                        lb[[row, k]] += c * (if k == y { 1.0 } else { 0.0 } - exps[k]);
                    }
                }
                add_to(grads, *logits, lb);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros if the objective never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape))
    }
}

/// Central finite-difference derivative of `f` along direction `dir`.
pub fn directional_derivative_fd(
    f: &mut dyn FnMut(&[Mat]) -> f64,
    params: &[Mat],
    dir: &[Mat],
    h: f64,
) -> f64 {
    let shift = |sign: f64| -> Vec<Mat> {
        params
            .iter()
            .zip(dir.iter())
            .map(|(p, d)| p + &(sign * h * d))
            .collect()
    };
    let plus = shift(1.0);
    let minus = shift(-1.0);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Randomized finite-difference gradient check: compares `<grads, v>` with a
/// central difference along `n_dirs` random unit directions and returns the
/// worst relative error.
pub fn gradcheck_directions(
    f: &mut dyn FnMut(&[Mat]) -> f64,
    params: &[Mat],
    grads: &[Mat],
    n_dirs: usize,
    h: f64,
    seed: u64,
) -> f64 {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_dirs {
        let mut dir: Vec<Mat> = params
            .iter()
            .map(|p| {
                let mut d = Mat::zeros(p.dim());
                for v in d.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                d
            })
            .collect();
        let norm: f64 = dir
            .iter()
            .flat_map(|d| d.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-300);
        for d in dir.iter_mut() {
            *d /= norm;
        }
        let analytic: f64 = grads
            .iter()
            .zip(dir.iter())
            .map(|(g, d)| g.iter().zip(d.iter()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let fd = directional_derivative_fd(f, params, &dir, h);
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic - fd).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphops::{erdos_renyi, normalize_kipf};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const NO_JITTER: &[f64] = &[0.0];

    fn random_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = Mat::zeros((r, c));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    fn random_spd_mat(n: usize, seed: u64) -> Mat {
        let m = random_mat(n, n, seed);
        m.dot(&m.t()) + 0.7 * Mat::eye(n)
    }

    /// Checks one scalar-valued tape program against finite differences.
    fn check(build: &dyn Fn(&mut Tape, &[Var]) -> Var, params: &[Mat], seed: u64) {
        let mut eval = |ps: &[Mat]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.scalar_value(root)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads_all = tape.backward(root).unwrap();
        let grads: Vec<Mat> = vars
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| grads_all.get_or_zeros(v, p.dim()))
            .collect();
        let worst = gradcheck_directions(&mut eval, params, &grads, 20, 1e-5, seed);
        assert!(worst < 1e-5, "worst relative FD error {worst:.3e}");
    }

    #[test]
    fn adjoint_matmul_chain() {
        let p = vec![random_mat(4, 3, 1), random_mat(3, 5, 2)];
        check(
            &|t, v| {
                let c = t.matmul(v[0], v[1]);
                let ct = t.transpose(c);
                let sq = t.matmul(c, ct);
                t.trace(sq)
            },
            &p,
            11,
        );
    }

    #[test]
    fn adjoint_add_sub_scale() {
        let p = vec![random_mat(3, 3, 3), random_mat(3, 3, 4)];
        check(
            &|t, v| {
                let s = t.sub(v[0], v[1]);
                let a = t.add(s, v[1]);
                let sc = t.scale(a, 2.5);
                let sc = t.add_const(sc, 0.7);
                let d = t.dot(sc, sc);
                t.scale(d, 0.5)
            },
            &p,
            12,
        );
    }

    #[test]
    fn adjoint_cholesky() {
        // build SPD inside the tape so FD directions stay valid
        let p = vec![random_mat(4, 4, 5)];
        check(
            &|t, v| {
                let vt = t.transpose(v[0]);
                let spd = t.matmul(v[0], vt);
                let spd = t.add_scaled_identity(spd, 3.0);
                let h = t.cholesky(spd, NO_JITTER).unwrap();
                let w = t.constant(random_mat(4, 4, 50));
                let d = t.dot(h, w);
                t.scale(d, 1.0)
            },
            &p,
            13,
        );
    }

    #[test]
    fn adjoint_cholesky_direct_lower_perturbations() {
        // cholesky reads only the lower triangle, so arbitrary directions
        // on a raw SPD parameter are valid too
        let p = vec![random_spd_mat(4, 6)];
        check(
            &|t, v| {
                let h = t.cholesky(v[0], NO_JITTER).unwrap();
                let w = t.constant(random_mat(4, 4, 51));
                t.dot(h, w)
            },
            &p,
            14,
        );
    }

    #[test]
    fn adjoint_triangular_solves() {
        let mut h = random_spd_mat(4, 7);
        // make it a plausible lower factor
        for i in 0..4 {
            for j in (i + 1)..4 {
                h[[i, j]] = 0.0;
            }
            h[[i, i]] += 2.0;
        }
        let p = vec![h, random_mat(4, 3, 8), random_mat(5, 4, 9)];
        check(
            &|t, v| {
                let x1 = t.solve_lower_left(v[0], v[1]);
                let x2 = t.solve_lower_trans_right(v[0], v[2]);
                let w1 = t.constant(random_mat(4, 3, 52));
                let w2 = t.constant(random_mat(5, 4, 53));
                let d1 = t.dot(x1, w1);
                let d2 = t.dot(x2, w2);
                t.add(d1, d2)
            },
            &p,
            15,
        );
    }

    #[test]
    fn adjoint_arccos_full() {
        let p = vec![random_spd_mat(5, 10)];
        check(
            &|t, v| {
                let k = t.arccos_full(v[0]);
                let w = t.constant(random_mat(5, 5, 54));
                t.dot(k, w)
            },
            &p,
            16,
        );
    }

    #[test]
    fn adjoint_arccos_cross() {
        let mut dr = random_mat(4, 1, 20);
        let mut dc = random_mat(3, 1, 21);
        for v in dr.iter_mut() {
            *v = v.abs() + 0.5;
        }
        for v in dc.iter_mut() {
            *v = v.abs() + 0.5;
        }
        let p = vec![0.3 * random_mat(4, 3, 22), dr, dc];
        check(
            &|t, v| {
                let k = t.arccos_cross(v[0], v[1], v[2]);
                let w = t.constant(random_mat(4, 3, 55));
                t.dot(k, w)
            },
            &p,
            17,
        );
    }

    #[test]
    fn adjoint_diag_and_row_norms() {
        let p = vec![random_mat(4, 4, 23), random_mat(5, 3, 24)];
        check(
            &|t, v| {
                let d = t.diag_of(v[0]);
                let r = t.row_squared_norms(v[1]);
                let wd = t.constant(random_mat(4, 1, 56));
                let wr = t.constant(random_mat(5, 1, 57));
                let d1 = t.dot(d, wd);
                let d2 = t.dot(r, wr);
                t.add(d1, d2)
            },
            &p,
            18,
        );
    }

    #[test]
    fn adjoint_spmm_both_sides() {
        let a = normalize_kipf(&erdos_renyi(6, 0.4, 30));
        let arc = Rc::new(a.matrix().clone());
        let art = Rc::new(a.matrix().transpose());
        let p = vec![random_mat(6, 4, 25), random_mat(3, 6, 26)];
        check(
            &|t, v| {
                let y1 = t.spmm_left(arc.clone(), art.clone(), v[0]);
                let y2 = t.spmm_right_t(v[1], arc.clone());
                let w1 = t.constant(random_mat(6, 4, 58));
                let w2 = t.constant(random_mat(3, 6, 59));
                let d1 = t.dot(y1, w1);
                let d2 = t.dot(y2, w2);
                t.add(d1, d2)
            },
            &p,
            19,
        );
    }

    #[test]
    fn adjoint_centering_ops() {
        let p = vec![random_mat(5, 4, 27), random_mat(4, 4, 28)];
        check(
            &|t, v| {
                let c = t.center_rows(v[0]);
                let dcc = t.double_center(v[1]);
                let w1 = t.constant(random_mat(5, 4, 60));
                let w2 = t.constant(random_mat(4, 4, 61));
                let d1 = t.dot(c, w1);
                let d2 = t.dot(dcc, w2);
                t.add(d1, d2)
            },
            &p,
            20,
        );
    }

    #[test]
    fn adjoint_scalar_mul_and_tril() {
        let p = vec![random_mat(1, 1, 29), random_mat(4, 4, 31)];
        check(
            &|t, v| {
                let s2 = t.matmul(v[0], v[0]); // scalar square
                let masked = t.tril_mask(v[1]);
                let scaled = t.scalar_mul_mat(s2, masked);
                let w = t.constant(random_mat(4, 4, 62));
                t.dot(scaled, w)
            },
            &p,
            21,
        );
    }

    #[test]
    fn adjoint_sum_log_diag() {
        let mut m = random_spd_mat(4, 33);
        for i in 0..4 {
            m[[i, i]] += 1.0;
        }
        let p = vec![m];
        check(
            &|t, v| {
                let s = t.sum_log_diag(v[0]).unwrap();
                t.scale(s, 1.3)
            },
            &p,
            22,
        );
    }

    #[test]
    fn adjoint_softmax_cross_entropy() {
        let p = vec![random_mat(6, 3, 34)];
        let rows = Rc::new(vec![0usize, 2, 3, 5]);
        let labels = Rc::new(vec![0usize, 1, 2, 1]);
        check(
            &|t, v| {
                let r = rows.clone();
                let l = labels.clone();
                t.softmax_cross_entropy_sum(v[0], r, l)
            },
            &p,
            23,
        );
    }

    #[test]
    fn trace_of_l_lt_gradient_is_2i_on_lower_triangle() {
        // objective Tr(L L^T) at L = I has gradient 2I
        let mut tape = Tape::new();
        let l = tape.param(Mat::eye(3));
        let masked = tape.tril_mask(l);
        let obj = tape.dot(masked, masked);
        let grads = tape.backward(obj).unwrap();
        let g = grads.get(l).unwrap();
        let expect = 2.0 * Mat::eye(3);
        for (a, b) in g.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::eye(2));
        let b = tape.param(Mat::eye(2));
        let d = tape.dot(a, a);
        let grads = tape.backward(d).unwrap();
        assert!(grads.get(b).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn softmax_single_class_loglik_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.param(random_mat(4, 1, 40));
        let s = tape.softmax_cross_entropy_sum(
            logits,
            Rc::new(vec![0, 1, 2, 3]),
            Rc::new(vec![0, 0, 0, 0]),
        );
        assert!(tape.scalar_value(s).abs() < 1e-14);
    }
}
