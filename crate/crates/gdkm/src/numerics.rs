//! Dense symmetric-matrix primitives shared by every other module:
//! Cholesky factorization with a jitter ladder, symmetric eigendecomposition,
//! fractional matrix powers, triangular solves and log-determinants.
//!
//! All routines work in 64-bit floats on row-major [`Mat`] values and are
//! pure functions of their inputs.

use ndarray::Array2;
use thiserror::Error;

/// Dense row-major matrix of 64-bit reals.
pub type Mat = Array2<f64>;

/// Relative symmetry tolerance applied when constructing an [`SpdMatrix`].
pub const SYMMETRY_RTOL: f64 = 1e-10;

/// Eigenvalues above `-FRAC_POWER_CLIP` (relative to the largest one) are
/// clipped to zero inside [`frac_power`]; anything below is an error.
pub const FRAC_POWER_CLIP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {asym:.3e} exceeds {tol:.3e}")]
    NotSymmetric { asym: f64, tol: f64 },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("factorization failed at every jitter level (pivot {last_pivot:.3e} at row {row})")]
    FactorizationFailed { row: usize, last_pivot: f64 },
    #[error("eigendecomposition did not converge ({sweeps} sweeps, off-diagonal norm {off:.3e})")]
    ConvergenceFailed { sweeps: usize, off: f64 },
    #[error("eigenvalue {value:.3e} is below the -1e-8 clip threshold")]
    NegativeEigenvalue { value: f64 },
    #[error("triangular matrix is singular at row {row}")]
    SingularTriangular { row: usize },
    #[error("non-positive diagonal entry {value:.3e} at row {row}")]
    NonPositiveDiagonal { row: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("strict upper triangle is not zero at ({row},{col}): {value:.3e}")]
    NotLowerTriangular { row: usize, col: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Maximum absolute asymmetry `|a_ij - a_ji|` of a square matrix.
pub fn max_asymmetry(a: &Mat) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Symmetric positive (semi)definite matrix.
///
/// Symmetry is validated on construction to a relative tolerance of 1e-10;
/// positive semidefiniteness is a caller contract checked in tests rather
/// than on every construction.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    data: Mat,
}

impl SpdMatrix {
    pub fn new(data: Mat) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(NumericsError::NotSquare { rows: r, cols: c });
        }
        let asym = max_asymmetry(&data);
        let scale = max_abs(&data).max(1.0);
        if asym > SYMMETRY_RTOL * scale {
            return Err(NumericsError::NotSymmetric {
                asym,
                tol: SYMMETRY_RTOL * scale,
            });
        }
        Ok(Self { data })
    }

    /// Builds from a nearly-symmetric matrix by averaging with its transpose.
    pub fn from_symmetrized(data: Mat) -> Result<Self> {
        let sym = 0.5 * (&data + &data.t());
        Self::new(sym)
    }

    pub fn identity(n: usize) -> Self {
        Self { data: Mat::eye(n) }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }
}

/// Dense lower-triangular matrix; the strict upper triangle is exactly zero.
#[derive(Debug, Clone)]
pub struct LowerTriangular {
    data: Mat,
}

impl LowerTriangular {
    pub fn new(data: Mat) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(NumericsError::NotSquare { rows: r, cols: c });
        }
        for i in 0..r {
            for j in (i + 1)..c {
                if data[[i, j]] != 0.0 {
                    return Err(NumericsError::NotLowerTriangular {
                        row: i,
                        col: j,
                        value: data[[i, j]],
                    });
                }
            }
        }
        Ok(Self { data })
    }

    pub fn identity(n: usize) -> Self {
        Self { data: Mat::eye(n) }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }
}

/// Ladder of jitter multipliers tried in order by [`cholesky`]. Each entry
/// is scaled by the mean diagonal of the input (or 1.0 when the diagonal is
/// non-positive) before being added to the diagonal.
#[derive(Debug, Clone)]
pub struct JitterPolicy {
    pub multipliers: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            multipliers: vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4],
        }
    }
}

impl JitterPolicy {
    /// Policy with no jitter at all; factorization fails on any non-PD input.
    pub fn none() -> Self {
        Self {
            multipliers: vec![0.0],
        }
    }

    /// Absolute jitter values for a matrix with the given mean diagonal.
    pub fn levels(&self, mean_diag: f64) -> Vec<f64> {
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        self.multipliers.iter().map(|m| m * scale).collect()
    }
}

/// Result of a successful Cholesky factorization: `factor * factor^T = m + jitter*I`.
#[derive(Debug, Clone)]
pub struct CholeskyOutcome {
    pub factor: LowerTriangular,
    pub jitter: f64,
}

fn flat(m: &Mat) -> std::borrow::Cow<'_, [f64]> {
    match m.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        // non-standard strides (e.g. transposed views turned owned): copy
        // out in logical row-major order
        None => std::borrow::Cow::Owned(m.iter().cloned().collect()),
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw lower Cholesky of a symmetric matrix, reading only the lower triangle.
/// Returns the failing row on a non-positive pivot.
pub(crate) fn cholesky_raw(a: &Mat, jitter: f64) -> std::result::Result<Mat, (usize, f64)> {
    let n = a.nrows();
    let av = flat(a);
    let av = av.as_ref();
    let mut h = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = av[i * n + j];
            if i == j {
                sum += jitter;
            }
            sum -= dot_slices(&h[i * n..i * n + j], &h[j * n..j * n + j]);
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err((i, sum));
                }
                h[i * n + i] = sum.sqrt();
            } else {
                h[i * n + j] = sum / h[j * n + j];
            }
        }
    }
    Ok(Mat::from_shape_vec((n, n), h).expect("shape matches"))
}

/// Cholesky factorization with a jitter ladder.
///
/// Tries each jitter level from the policy in order and returns the factor
/// for the smallest level that succeeds, together with the jitter used.
pub fn cholesky(m: &SpdMatrix, policy: &JitterPolicy) -> Result<CholeskyOutcome> {
    let a = m.as_mat();
    let n = m.dim();
    let mean_diag = (0..n).map(|i| a[[i, i]]).sum::<f64>() / n.max(1) as f64;
    let mut last_fail = (0usize, f64::NAN);
    for delta in policy.levels(mean_diag) {
        match cholesky_raw(a, delta) {
            Ok(h) => {
                return Ok(CholeskyOutcome {
                    factor: LowerTriangular { data: h },
                    jitter: delta,
                })
            }
            Err(fail) => last_fail = fail,
        }
    }
    Err(NumericsError::FactorizationFailed {
        row: last_fail.0,
        last_pivot: last_fail.1,
    })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns, with the sign convention that the first
/// significantly nonzero component of each eigenvector is positive.
pub fn sym_eig(m: &SpdMatrix) -> Result<(Vec<f64>, Mat)> {
    let n = m.dim();
    let mut a = m.as_mat().clone();
    let mut v = Mat::eye(n);
    if n <= 1 {
        return Ok(((0..n).map(|_| a[[0, 0]]).collect(), v));
    }
    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-14 * fro;
    let max_sweeps = 64;
    let mut converged = false;
    let mut last_off = 0.0;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        last_off = (2.0 * off).sqrt();
        if last_off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::ConvergenceFailed {
            sweeps: max_sweeps,
            off: last_off,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let mut w = Vec::with_capacity(n);
    let mut vecs = Mat::zeros((n, n));
    for (col, &idx) in order.iter().enumerate() {
        w.push(a[[idx, idx]]);
        let mut maxabs = 0.0f64;
        for k in 0..n {
            maxabs = maxabs.max(v[[k, idx]].abs());
        }
        let mut sign = 1.0;
        for k in 0..n {
            if v[[k, idx]].abs() > 1e-12 * maxabs.max(1e-300) {
                sign = v[[k, idx]].signum();
                break;
            }
        }
        for k in 0..n {
            vecs[[k, col]] = sign * v[[k, idx]];
        }
    }
    Ok((w, vecs))
}

/// Fractional power `m^p` of a symmetric PSD matrix, `p` in `[0, 1]`,
/// computed through the eigendecomposition `V diag(w)^p V^T`.
///
/// Eigenvalues in `(-1e-8 * w_max, 0)` are clipped to zero; anything more
/// negative is an error (the input was not PSD).
pub fn frac_power(m: &Mat, p: f64) -> Result<Mat> {
    let spd = SpdMatrix::new(m.clone())?;
    let (w, v) = sym_eig(&spd)?;
    let wmax = w.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let mut wp = Vec::with_capacity(w.len());
    for &lam in &w {
        if lam < -FRAC_POWER_CLIP * wmax {
            return Err(NumericsError::NegativeEigenvalue { value: lam });
        }
        let lam = lam.max(0.0);
        wp.push(lam.powf(p));
    }
    let n = w.len();
    let mut scaled = v.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[[i, j]] *= wp[j];
        }
    }
    let out = scaled.dot(&v.t());
    Ok(0.5 * (&out + &out.t()))
}

/// Which side of `b` the triangular inverse is applied on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Solves a triangular system with the lower-triangular factor `h`:
///
/// - `Left,  transpose=false`: returns `h^-1 * b`
/// - `Left,  transpose=true`:  returns `h^-T * b`
/// - `Right, transpose=false`: returns `b * h^-1`
/// - `Right, transpose=true`:  returns `b * h^-T`
pub fn tri_solve(h: &LowerTriangular, b: &Mat, side: Side, transpose: bool) -> Result<Mat> {
    let n = h.dim();
    let hm = h.as_mat();
    for i in 0..n {
        if hm[[i, i]] == 0.0 || !hm[[i, i]].is_finite() {
            return Err(NumericsError::SingularTriangular { row: i });
        }
    }
    let (br, bc) = b.dim();
    let expected = match side {
        Side::Left => br,
        Side::Right => bc,
    };
    if expected != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "triangular factor is {n}x{n} but rhs is {br}x{bc} on side {side:?}"
        )));
    }
    Ok(match (side, transpose) {
        (Side::Left, false) => solve_lower_left(hm, b),
        (Side::Left, true) => solve_lower_trans_left(hm, b),
        (Side::Right, false) => solve_lower_right(b, hm),
        (Side::Right, true) => solve_lower_trans_right(b, hm),
    })
}

/// `h^-1 * b` by forward substitution (h lower triangular).
pub(crate) fn solve_lower_left(h: &Mat, b: &Mat) -> Mat {
    let n = h.nrows();
    let cols = b.ncols();
    let hv = flat(h);
    let hv = hv.as_ref();
    let mut x = flat(b).into_owned();
    for i in 0..n {
        let (done, rest) = x.split_at_mut(i * cols);
        let xi = &mut rest[..cols];
        for k in 0..i {
            let hik = hv[i * n + k];
            if hik != 0.0 {
                let xk = &done[k * cols..(k + 1) * cols];
                for (a, b) in xi.iter_mut().zip(xk) {
                    *a -= hik * b;
                }
            }
        }
        let d = hv[i * n + i];
        for a in xi.iter_mut() {
            *a /= d;
        }
    }
    Mat::from_shape_vec((n, cols), x).expect("shape matches")
}

/// `h^-T * b` by backward substitution.
pub(crate) fn solve_lower_trans_left(h: &Mat, b: &Mat) -> Mat {
    let n = h.nrows();
    let cols = b.ncols();
    let hv = flat(h);
    let hv = hv.as_ref();
    let mut x = flat(b).into_owned();
    for ii in 0..n {
        let i = n - 1 - ii;
        let (head, tail) = x.split_at_mut((i + 1) * cols);
        let xi = &mut head[i * cols..];
        for k in (i + 1)..n {
            let hki = hv[k * n + i];
            if hki != 0.0 {
                let xk = &tail[(k - i - 1) * cols..(k - i) * cols];
                for (a, b) in xi.iter_mut().zip(xk) {
                    *a -= hki * b;
                }
            }
        }
        let d = hv[i * n + i];
        for a in xi.iter_mut() {
            *a /= d;
        }
    }
    Mat::from_shape_vec((n, cols), x).expect("shape matches")
}

/// `b * h^-1`; per-row backward substitution against the transpose of `h`.
pub(crate) fn solve_lower_right(b: &Mat, h: &Mat) -> Mat {
    let n = h.nrows();
    let rows = b.nrows();
    let ht = h.t().to_owned(); // rows of ht are columns of h
    let htv = flat(&ht);
    let htv = htv.as_ref();
    let mut x = flat(b).into_owned();
    // x h = b  =>  per row r: x[j] = (b[j] - sum_{k>j} x[k] h[k,j]) / h[j,j]
    for r in 0..rows {
        let xr = &mut x[r * n..(r + 1) * n];
        for jj in 0..n {
            let j = n - 1 - jj;
            let (head, tail) = xr.split_at_mut(j + 1);
            let hcol = &htv[j * n + j + 1..(j + 1) * n];
            head[j] = (head[j] - dot_slices(tail, hcol)) / htv[j * n + j];
        }
    }
    Mat::from_shape_vec((rows, n), x).expect("shape matches")
}

/// `b * h^-T`; row-wise forward substitution against `h`.
pub(crate) fn solve_lower_trans_right(b: &Mat, h: &Mat) -> Mat {
    let n = h.nrows();
    let rows = b.nrows();
    let hv = flat(h);
    let hv = hv.as_ref();
    let mut x = flat(b).into_owned();
    // x h^T = b  =>  per row r: h x_r^T = b_r^T (forward substitution)
    for r in 0..rows {
        let xr = &mut x[r * n..(r + 1) * n];
        for i in 0..n {
            let (head, rest) = xr.split_at_mut(i);
            let sum = rest[0] - dot_slices(head, &hv[i * n..i * n + i]);
            rest[0] = sum / hv[i * n + i];
        }
    }
    Mat::from_shape_vec((rows, n), x).expect("shape matches")
}

/// `log det(h h^T) = 2 * sum_j log h_jj` for a Cholesky factor `h`.
pub fn logdet_from_chol(h: &LowerTriangular) -> Result<f64> {
    let n = h.dim();
    let hm = h.as_mat();
    let mut acc = 0.0;
    for i in 0..n {
        let d = hm[[i, i]];
        if d <= 0.0 || d.is_nan() {
            return Err(NumericsError::NonPositiveDiagonal { row: i, value: d });
        }
        acc += d.ln();
    }
    Ok(2.0 * acc)
}
