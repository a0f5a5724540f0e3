//! Kernel nonlinearities over Gram matrices (arccosine and linear), the
//! graph convolutional block kernel, the centering layer and CKA.

use crate::graphops::{CsrMatrix, NormalizedAdjacency};
use crate::numerics::{Mat, SpdMatrix};
use thiserror::Error;

/// Diagonal entries below this floor are lifted before entering the
/// arccosine formula, avoiding 0/0 on zero-norm points.
pub const DIAG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("centered kernel has zero Frobenius norm")]
    DegenerateKernel,
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// One arccosine-kernel entry:
/// `K_ij = sqrt(d_i d_j)/pi * (sin t + (pi - t) cos t)` with
/// `cos t = g_ij / sqrt(d_i d_j)` clipped to `[-1, 1]`.
#[inline]
pub(crate) fn arccos_entry(g_ij: f64, d_i: f64, d_j: f64) -> f64 {
    let di = d_i.max(DIAG_FLOOR);
    let dj = d_j.max(DIAG_FLOOR);
    let r = (di * dj).sqrt();
    let c = (g_ij / r).clamp(-1.0, 1.0);
    let theta = c.acos();
    let s = (1.0 - c * c).max(0.0).sqrt();
    r * (s + (std::f64::consts::PI - theta) * c) / std::f64::consts::PI
}

/// Entry value together with partial derivatives w.r.t. `g_ij`, `d_i`, `d_j`.
/// Derivatives w.r.t. floored diagonals are zero.
#[inline]
pub(crate) fn arccos_entry_with_partials(g_ij: f64, d_i: f64, d_j: f64) -> (f64, f64, f64, f64) {
    let pi = std::f64::consts::PI;
    let floored_i = d_i <= DIAG_FLOOR;
    let floored_j = d_j <= DIAG_FLOOR;
    let di = d_i.max(DIAG_FLOOR);
    let dj = d_j.max(DIAG_FLOOR);
    let r = (di * dj).sqrt();
    let c = (g_ij / r).clamp(-1.0, 1.0);
    let theta = c.acos();
    let s = (1.0 - c * c).max(0.0).sqrt();
    let k = r * (s + (pi - theta) * c) / pi;
    let dk_dg = (pi - theta) / pi;
    let common = r * s / (2.0 * pi);
    let dk_di = if floored_i { 0.0 } else { common / di };
    let dk_dj = if floored_j { 0.0 } else { common / dj };
    (k, dk_dg, dk_di, dk_dj)
}

/// Arccosine kernel of a full Gram matrix (the infinite-width ReLU kernel).
pub fn arccos_kernel(g: &SpdMatrix) -> SpdMatrix {
    let gm = g.as_mat();
    let n = g.dim();
    let mut out = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = arccos_entry(gm[[i, j]], gm[[i, i]], gm[[j, j]]);
        }
    }
    SpdMatrix::new(out).expect("arccos kernel of symmetric input is symmetric")
}

/// The linear kernel is the identity map on Gram matrices.
pub fn linear_kernel(g: &SpdMatrix) -> SpdMatrix {
    g.clone()
}

/// Base kernel selector shared by the NNGP and DKM forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKernel {
    Arccos,
    Linear,
}

impl BaseKernel {
    pub fn apply(&self, g: &SpdMatrix) -> SpdMatrix {
        match self {
            BaseKernel::Arccos => arccos_kernel(g),
            BaseKernel::Linear => linear_kernel(g),
        }
    }

    pub fn apply_block(&self, g: &BlockGram) -> BlockGram {
        match self {
            BaseKernel::Arccos => arccos_kernel_cross(g),
            BaseKernel::Linear => g.clone(),
        }
    }
}

/// Test/train-test/train block of a [`BlockGram`]: full matrix, diagonal
/// only (the low-memory path), or not tracked at all.
///
/// `Absent` only ever appears on sandwiched-kernel intermediates whose tt
/// block is never consumed; Gram matrices themselves carry `Full` or `Diag`.
#[derive(Debug, Clone)]
pub enum GttBlock {
    Full(Mat),
    Diag(Vec<f64>),
    Absent,
}

/// Block partition of a Gram (or kernel) matrix over inducing (i) and
/// test/train (t) points: `[[G_ii, G_it], [G_ti, G_tt]]`.
#[derive(Debug, Clone)]
pub struct BlockGram {
    pub g_ii: Mat,
    pub g_ti: Mat,
    pub g_tt: GttBlock,
}

impl BlockGram {
    pub fn num_inducing(&self) -> usize {
        self.g_ii.nrows()
    }

    pub fn num_test(&self) -> usize {
        self.g_ti.nrows()
    }

    pub fn diag_ii(&self) -> Vec<f64> {
        (0..self.num_inducing())
            .map(|i| self.g_ii[[i, i]])
            .collect()
    }

    pub fn diag_tt(&self) -> Option<Vec<f64>> {
        match &self.g_tt {
            GttBlock::Full(m) => Some((0..m.nrows()).map(|i| m[[i, i]]).collect()),
            GttBlock::Diag(d) => Some(d.clone()),
            GttBlock::Absent => None,
        }
    }

    /// Assembles the dense `(P_i + P_t)` square matrix; requires a full tt block.
    pub fn assemble(&self) -> Result<Mat> {
        let tt = match &self.g_tt {
            GttBlock::Full(m) => m,
            _ => {
                return Err(KernelError::DimensionMismatch(
                    "cannot assemble a BlockGram without a full tt block".into(),
                ))
            }
        };
        let pi = self.num_inducing();
        let pt = self.num_test();
        let mut out = Mat::zeros((pi + pt, pi + pt));
        for i in 0..pi {
            for j in 0..pi {
                out[[i, j]] = self.g_ii[[i, j]];
            }
        }
        for u in 0..pt {
            for j in 0..pi {
                out[[pi + u, j]] = self.g_ti[[u, j]];
                out[[j, pi + u]] = self.g_ti[[u, j]];
            }
        }
        for u in 0..pt {
            for v in 0..pt {
                out[[pi + u, pi + v]] = tt[[u, v]];
            }
        }
        Ok(out)
    }

    /// Splits a dense symmetric matrix into blocks with `p_i` inducing rows.
    pub fn split(full: &Mat, p_i: usize) -> Self {
        let n = full.nrows();
        let pt = n - p_i;
        let mut g_ii = Mat::zeros((p_i, p_i));
        let mut g_ti = Mat::zeros((pt, p_i));
        let mut g_tt = Mat::zeros((pt, pt));
        for i in 0..p_i {
            for j in 0..p_i {
                g_ii[[i, j]] = full[[i, j]];
            }
        }
        for u in 0..pt {
            for j in 0..p_i {
                g_ti[[u, j]] = full[[p_i + u, j]];
            }
        }
        for u in 0..pt {
            for v in 0..pt {
                g_tt[[u, v]] = full[[p_i + u, p_i + v]];
            }
        }
        BlockGram {
            g_ii,
            g_ti,
            g_tt: GttBlock::Full(g_tt),
        }
    }
}

/// Arccosine kernel applied blockwise, using the block diagonals for the
/// cross terms. The tt block maps `Full -> Full`, `Diag -> Diag` (the
/// arccosine kernel preserves diagonals), `Absent -> Absent`.
pub fn arccos_kernel_cross(g: &BlockGram) -> BlockGram {
    let pi = g.num_inducing();
    let pt = g.num_test();
    let d_i = g.diag_ii();
    let mut k_ii = Mat::zeros((pi, pi));
    for i in 0..pi {
        for j in 0..pi {
            k_ii[[i, j]] = arccos_entry(g.g_ii[[i, j]], d_i[i], d_i[j]);
        }
    }
    let d_t = g
        .diag_tt()
        .expect("cross-block arccos kernel needs the tt diagonal");
    let mut k_ti = Mat::zeros((pt, pi));
    for u in 0..pt {
        for j in 0..pi {
            k_ti[[u, j]] = arccos_entry(g.g_ti[[u, j]], d_t[u], d_i[j]);
        }
    }
    let k_tt = match &g.g_tt {
        GttBlock::Full(m) => {
            let mut out = Mat::zeros((pt, pt));
            for u in 0..pt {
                for v in 0..pt {
                    out[[u, v]] = arccos_entry(m[[u, v]], d_t[u], d_t[v]);
                }
            }
            GttBlock::Full(out)
        }
        GttBlock::Diag(d) => GttBlock::Diag(d.iter().map(|&x| arccos_entry(x, x, x)).collect()),
        GttBlock::Absent => GttBlock::Absent,
    };
    BlockGram {
        g_ii: k_ii,
        g_ti: k_ti,
        g_tt: k_tt,
    }
}

/// Graph convolution of a kernel matrix: `A_hat * k * A_hat^T`.
pub fn graph_conv(k: &SpdMatrix, a: &NormalizedAdjacency) -> Result<SpdMatrix> {
    if a.dim() != k.dim() {
        return Err(KernelError::DimensionMismatch(format!(
            "adjacency is {}x{} but kernel is {}x{}",
            a.dim(),
            a.dim(),
            k.dim(),
            k.dim()
        )));
    }
    let ak = a.matrix().matmul_dense(k.as_mat());
    let aka = a.matrix().matmul_dense_left_transposed(&ak);
    let sym = 0.5 * (&aka + &aka.t());
    Ok(SpdMatrix::new(sym).expect("congruence preserves symmetry"))
}

/// Graph convolution over a block partition,
/// `[[A_ii, A_it], [A_ti, A_tt]] K [[..]]^T`, computed blockwise.
///
/// With `A_ti = 0` (inter-domain) no dense `P x P` product is formed and a
/// `Diag`/`Absent` tt input yields an `Absent` tt output; otherwise a full
/// tt block is required.
pub fn graph_conv_block(
    k: &BlockGram,
    a_ii: &CsrMatrix,
    a_ti: &CsrMatrix,
    a_tt: &CsrMatrix,
) -> Result<BlockGram> {
    let pi = k.num_inducing();
    let pt = k.num_test();
    if a_ii.nrows() != pi || a_ti.nrows() != pt || a_ti.ncols() != pi || a_tt.nrows() != pt {
        return Err(KernelError::DimensionMismatch(format!(
            "adjacency blocks ({}x{}, {}x{}, {}x{}) do not conform to kernel blocks ({} inducing, {} test)",
            a_ii.nrows(), a_ii.ncols(), a_ti.nrows(), a_ti.ncols(), a_tt.nrows(), a_tt.ncols(), pi, pt
        )));
    }
    let inter = a_ti.nnz() == 0;
    if inter {
        // K_ii = A_ii P_ii A_ii^T ; K_ti = A_tt P_ti A_ii^T ; K_tt = A_tt P_tt A_tt^T
        let k_ii = {
            let t = a_ii.matmul_dense(&k.g_ii);
            a_ii.matmul_dense_left_transposed(&t)
        };
        let k_ti = {
            let t = a_tt.matmul_dense(&k.g_ti);
            a_ii.matmul_dense_left_transposed(&t)
        };
        let k_tt = match &k.g_tt {
            GttBlock::Full(m) => {
                let t = a_tt.matmul_dense(m);
                GttBlock::Full(a_tt.matmul_dense_left_transposed(&t))
            }
            _ => GttBlock::Absent,
        };
        return Ok(BlockGram {
            g_ii: k_ii,
            g_ti: k_ti,
            g_tt: k_tt,
        });
    }
    let p_tt = match &k.g_tt {
        GttBlock::Full(m) => m,
        _ => {
            return Err(KernelError::DimensionMismatch(
                "intra-domain graph convolution needs a full tt block".into(),
            ))
        }
    };
    let a_it = a_ti.transpose();
    let p_it = k.g_ti.t().to_owned();
    // top row of A * P
    let top_i = &a_ii.matmul_dense(&k.g_ii) + &a_it.matmul_dense(&k.g_ti); // P_i x P_i
    let top_t = &a_ii.matmul_dense(&p_it) + &a_it.matmul_dense(p_tt); // P_i x P_t
                                                                      // bottom row of A * P
    let bot_i = &a_ti.matmul_dense(&k.g_ii) + &a_tt.matmul_dense(&k.g_ti); // P_t x P_i
    let bot_t = &a_ti.matmul_dense(&p_it) + &a_tt.matmul_dense(p_tt); // P_t x P_t
                                                                      // multiply by A^T = [[A_ii^T, A_ti^T], [A_it^T, A_tt^T]] blockwise
    let k_ii = &a_ii.matmul_dense_left_transposed(&top_i) + &a_ti.matmul_dense_left(&top_t);
    let k_ti = &a_ii.matmul_dense_left_transposed(&bot_i) + &a_ti.matmul_dense_left(&bot_t);
    let k_tt =
        &a_ti.matmul_dense_left_transposed(&bot_i) + &a_tt.matmul_dense_left_transposed(&bot_t);
    Ok(BlockGram {
        g_ii: 0.5 * (&k_ii + &k_ii.t()),
        g_ti: k_ti,
        g_tt: GttBlock::Full(0.5 * (&k_tt + &k_tt.t())),
    })
}

/// Learnable centering layer parameters (scale `gamma`, bias `beta`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CenteringParams {
    pub enabled: bool,
    pub learn_affine: bool,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for CenteringParams {
    fn default() -> Self {
        Self {
            enabled: false,
            learn_affine: false,
            gamma: 1.0,
            beta: 0.0,
        }
    }
}

/// Feature matrix or kernel matrix input to [`center_kernel`].
#[derive(Debug, Clone)]
pub enum CenterInput {
    Features(Mat),
    Kernel(Mat),
}

/// Removes the per-feature mean over datapoints: `F - colmeans(F)`.
pub(crate) fn center_rows(f: &Mat) -> Mat {
    let (rows, cols) = f.dim();
    let mut out = f.clone();
    for j in 0..cols {
        let mean: f64 = (0..rows).map(|i| f[[i, j]]).sum::<f64>() / rows.max(1) as f64;
        for i in 0..rows {
            out[[i, j]] -= mean;
        }
    }
    out
}

/// Double centering `C_rows * K * C_cols` with `C = I - ones/n` on each side.
pub(crate) fn double_center(k: &Mat) -> Mat {
    let (rows, cols) = k.dim();
    let mut row_means = vec![0.0f64; rows];
    let mut col_means = vec![0.0f64; cols];
    let mut grand = 0.0f64;
    for i in 0..rows {
        for j in 0..cols {
            let v = k[[i, j]];
            row_means[i] += v;
            col_means[j] += v;
            grand += v;
        }
    }
    for m in row_means.iter_mut() {
        *m /= cols as f64;
    }
    for m in col_means.iter_mut() {
        *m /= rows as f64;
    }
    grand /= (rows * cols) as f64;
    let mut out = Mat::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            out[[i, j]] = k[[i, j]] - row_means[i] - col_means[j] + grand;
        }
    }
    out
}

/// Centering layer on features (`F'' = gamma (F - mean) + beta`) or on the
/// equivalent Gram representation (`K'' = gamma^2 C K C + beta^2 ones`; the
/// gamma-beta cross terms vanish because centered features have zero mean).
pub fn center_kernel(input: &CenterInput, params: &CenteringParams) -> CenterInput {
    if !params.enabled {
        return input.clone();
    }
    let (gamma, beta) = if params.learn_affine {
        (params.gamma, params.beta)
    } else {
        (1.0, 0.0)
    };
    match input {
        CenterInput::Features(f) => {
            let mut out = center_rows(f);
            for v in out.iter_mut() {
                *v = gamma * *v + beta;
            }
            CenterInput::Features(out)
        }
        CenterInput::Kernel(k) => {
            let c = double_center(k);
            let g2 = gamma * gamma;
            let b2 = beta * beta;
            let mut out = c;
            for v in out.iter_mut() {
                *v = g2 * *v + b2;
            }
            CenterInput::Kernel(out)
        }
    }
}

/// Entrywise normalization `k_ij / sqrt(k_ii k_jj)`, mapping kernel entries
/// into `[-1, 1]` for display; rows/columns with non-positive diagonal are
/// left unscaled.
pub fn normalize_kernel(k: &Mat) -> Mat {
    let n = k.nrows();
    let mut out = k.clone();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let v = k[[i, i]];
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] /= d[i] * d[j];
        }
    }
    out
}

/// Centered kernel alignment between two kernels of the same size:
/// `Tr(K1' K2') / sqrt(Tr(K1' K1') Tr(K2' K2'))` with double centering.
pub fn cka(k1: &SpdMatrix, k2: &SpdMatrix) -> Result<f64> {
    if k1.dim() != k2.dim() {
        return Err(KernelError::DimensionMismatch(format!(
            "kernels are {}x{} and {}x{}",
            k1.dim(),
            k1.dim(),
            k2.dim(),
            k2.dim()
        )));
    }
    let c1 = double_center(k1.as_mat());
    let c2 = double_center(k2.as_mat());
    let dot = |a: &Mat, b: &Mat| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let n1 = dot(&c1, &c1);
    let n2 = dot(&c2, &c2);
    if n1 <= 0.0 || n2 <= 0.0 {
        return Err(KernelError::DegenerateKernel);
    }
    Ok((dot(&c1, &c2) / (n1 * n2).sqrt()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphops::{erdos_renyi, normalize_kipf, EdgeList};
    use crate::numerics::sym_eig;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = Mat::zeros((n, n));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let spd = m.dot(&m.t()) + 0.1 * Mat::eye(n);
        SpdMatrix::new(spd).unwrap()
    }

    #[test]
    fn arccos_identity_values() {
        let k = arccos_kernel(&SpdMatrix::identity(2));
        let km = k.as_mat();
        assert!((km[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((km[[1, 1]] - 1.0).abs() < 1e-15);
        let expect = 1.0 / std::f64::consts::PI;
        assert!((km[[0, 1]] - expect).abs() < 1e-15);
    }

    #[test]
    fn arccos_perfectly_correlated_unchanged() {
        let g = SpdMatrix::new(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let k = arccos_kernel(&g);
        assert!(max_abs_diff(k.as_mat(), g.as_mat()) < 1e-15);
    }

    #[test]
    fn arccos_scales_diagonal_linearly() {
        for c in [0.5, 2.0, 7.5] {
            let g = SpdMatrix::new(c * Mat::eye(3)).unwrap();
            let k = arccos_kernel(&g);
            for i in 0..3 {
                assert!((k.as_mat()[[i, i]] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn arccos_preserves_diagonal_and_psd() {
        for seed in 0..4 {
            let g = random_spd(10, seed);
            let k = arccos_kernel(&g);
            for i in 0..10 {
                assert!((k.as_mat()[[i, i]] - g.as_mat()[[i, i]]).abs() < 1e-12);
            }
            let (w, _) = sym_eig(&k).unwrap();
            let wmax = w[0].max(1.0);
            assert!(w.iter().all(|&x| x >= -1e-10 * wmax), "eigs {w:?}");
        }
    }

    #[test]
    fn arccos_cross_zero_block() {
        let g = BlockGram {
            g_ii: 2.0 * Mat::eye(2),
            g_ti: Mat::zeros((3, 2)),
            g_tt: GttBlock::Diag(vec![3.0; 3]),
        };
        let k = arccos_kernel_cross(&g);
        // theta = pi/2 everywhere on the cross block
        let expect = (2.0f64 * 3.0).sqrt() / std::f64::consts::PI;
        for v in k.g_ti.iter() {
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn arccos_cross_matches_full_on_identity() {
        let full = arccos_kernel(&SpdMatrix::identity(5));
        let blocks = BlockGram::split(&Mat::eye(5), 2);
        let k = arccos_kernel_cross(&blocks);
        let assembled = k.assemble().unwrap();
        assert!(max_abs_diff(&assembled, full.as_mat()) < 1e-14);
    }

    #[test]
    fn arccos_cross_matches_assembled_oracle() {
        let g = random_spd(6, 42);
        let full = arccos_kernel(&g);
        let blocks = BlockGram::split(g.as_mat(), 2);
        let k = arccos_kernel_cross(&blocks);
        assert!(max_abs_diff(&k.assemble().unwrap(), full.as_mat()) < 1e-12);
    }

    #[test]
    fn linear_kernel_is_identity() {
        let g = random_spd(4, 1);
        assert!(max_abs_diff(linear_kernel(&g).as_mat(), g.as_mat()) < 1e-300);
    }

    #[test]
    fn graph_conv_identity_adjacency() {
        let e = EdgeList::new(&[], 3).unwrap();
        let a = normalize_kipf(&e); // isolated nodes: identity
        let k = random_spd(3, 2);
        let out = graph_conv(&k, &a).unwrap();
        assert!(max_abs_diff(out.as_mat(), k.as_mat()) < 1e-14);
    }

    #[test]
    fn graph_conv_two_node_hand_case() {
        let e = EdgeList::new(&[(0, 1)], 2).unwrap();
        let a = normalize_kipf(&e); // all entries 0.5
        let out = graph_conv(&SpdMatrix::identity(2), &a).unwrap();
        for v in out.as_mat().iter() {
            assert!((v - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn graph_conv_output_symmetric() {
        let e = erdos_renyi(12, 0.3, 9);
        let a = normalize_kipf(&e);
        let k = random_spd(12, 3);
        let out = graph_conv(&k, &a).unwrap();
        assert!(crate::numerics::max_asymmetry(out.as_mat()) < 1e-14);
    }

    #[test]
    fn graph_conv_block_all_identity() {
        let g = random_spd(6, 5);
        let blocks = BlockGram::split(g.as_mat(), 2);
        let out = graph_conv_block(
            &blocks,
            &CsrMatrix::identity(2),
            &CsrMatrix::zeros(4, 2),
            &CsrMatrix::identity(4),
        )
        .unwrap();
        assert!(max_abs_diff(&out.assemble().unwrap(), g.as_mat()) < 1e-14);
    }

    #[test]
    fn graph_conv_block_inter_domain_shapes() {
        // A_ii = I, A_ti = 0: ii block passes through, ti and tt are convolved
        let g = random_spd(7, 8);
        let blocks = BlockGram::split(g.as_mat(), 3);
        let e = erdos_renyi(4, 0.6, 4);
        let a_tt = normalize_kipf(&e);
        let out = graph_conv_block(
            &blocks,
            &CsrMatrix::identity(3),
            &CsrMatrix::zeros(4, 3),
            a_tt.matrix(),
        )
        .unwrap();
        assert!(max_abs_diff(&out.g_ii, &blocks.g_ii) < 1e-14);
        let expect_ti = a_tt.matrix().matmul_dense(&blocks.g_ti);
        assert!(max_abs_diff(&out.g_ti, &expect_ti) < 1e-14);
        let tt_in = match &blocks.g_tt {
            GttBlock::Full(m) => m.clone(),
            _ => unreachable!(),
        };
        let expect_tt = {
            let t = a_tt.matrix().matmul_dense(&tt_in);
            a_tt.matrix().matmul_dense_left_transposed(&t)
        };
        match &out.g_tt {
            GttBlock::Full(m) => assert!(max_abs_diff(m, &expect_tt) < 1e-14),
            _ => panic!("expected full tt block"),
        }
    }

    #[test]
    fn graph_conv_block_intra_matches_dense_oracle() {
        // small intra-domain instance vs assembling the dense sandwich
        let p_i = 3;
        let p_t = 5;
        let e = erdos_renyi(p_t, 0.5, 11);
        let a_tt = normalize_kipf(&e);
        let inducing: Vec<usize> = vec![0, 2, 4];
        let all: Vec<usize> = (0..p_t).collect();
        let a_ii = a_tt.matrix().submatrix(&inducing, &inducing);
        let a_ti = a_tt.matrix().submatrix(&all, &inducing);
        let g = random_spd(p_i + p_t, 21);
        let blocks = BlockGram::split(g.as_mat(), p_i);
        let out = graph_conv_block(&blocks, &a_ii, &a_ti, a_tt.matrix()).unwrap();

        // dense oracle
        let n = p_i + p_t;
        let mut a_full = Mat::zeros((n, n));
        let aii = a_ii.to_dense();
        let ati = a_ti.to_dense();
        let att = a_tt.to_dense();
        for i in 0..p_i {
            for j in 0..p_i {
                a_full[[i, j]] = aii[[i, j]];
            }
        }
        for u in 0..p_t {
            for j in 0..p_i {
                a_full[[p_i + u, j]] = ati[[u, j]];
                a_full[[j, p_i + u]] = ati[[u, j]];
            }
        }
        for u in 0..p_t {
            for v in 0..p_t {
                a_full[[p_i + u, p_i + v]] = att[[u, v]];
            }
        }
        let dense = a_full.dot(g.as_mat()).dot(&a_full.t());
        assert!(max_abs_diff(&out.assemble().unwrap(), &dense) < 1e-12);
    }

    #[test]
    fn center_noop_when_disabled_or_trivial() {
        let k = double_center(&random_spd(4, 3).into_mat());
        let params = CenteringParams {
            enabled: true,
            learn_affine: true,
            gamma: 1.0,
            beta: 0.0,
        };
        // already-centered kernel with gamma=1, beta=0 stays put
        match center_kernel(&CenterInput::Kernel(k.clone()), &params) {
            CenterInput::Kernel(out) => assert!(max_abs_diff(&out, &k) < 1e-12),
            _ => panic!(),
        }
    }

    #[test]
    fn center_annihilates_constant_kernel() {
        let ones = Mat::from_elem((2, 2), 1.0);
        let params = CenteringParams {
            enabled: true,
            ..Default::default()
        };
        match center_kernel(&CenterInput::Kernel(ones), &params) {
            CenterInput::Kernel(out) => assert!(out.iter().all(|v| v.abs() < 1e-15)),
            _ => panic!(),
        }
    }

    #[test]
    fn center_scale_law() {
        let k = double_center(&random_spd(5, 6).into_mat());
        let params = CenteringParams {
            enabled: true,
            learn_affine: true,
            gamma: 2.0,
            beta: 0.0,
        };
        match center_kernel(&CenterInput::Kernel(k.clone()), &params) {
            CenterInput::Kernel(out) => assert!(max_abs_diff(&out, &(4.0 * &k)) < 1e-12),
            _ => panic!(),
        }
    }

    #[test]
    fn cka_self_and_scale_invariance() {
        let k = random_spd(8, 12);
        assert!((cka(&k, &k).unwrap() - 1.0).abs() < 1e-12);
        let scaled = SpdMatrix::new(3.5 * k.as_mat()).unwrap();
        assert!((cka(&k, &scaled).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_orthogonal_rank_one_kernels() {
        // two rank-1 kernels from centered orthogonal vectors
        let u = array![[1.0], [-1.0], [1.0], [-1.0]];
        let v = array![[1.0], [1.0], [-1.0], [-1.0]];
        let k1 = SpdMatrix::new(u.dot(&u.t())).unwrap();
        let k2 = SpdMatrix::new(v.dot(&v.t())).unwrap();
        assert!(cka(&k1, &k2).unwrap() < 1e-12);
    }

    #[test]
    fn cka_symmetric_in_arguments() {
        let k1 = random_spd(6, 31);
        let k2 = random_spd(6, 32);
        let a = cka(&k1, &k2).unwrap();
        let b = cka(&k2, &k1).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cka_degenerate_kernel_errors() {
        let ones = SpdMatrix::new(Mat::from_elem((3, 3), 1.0)).unwrap();
        let k = random_spd(3, 2);
        assert!(matches!(
            cka(&ones, &k).unwrap_err(),
            KernelError::DegenerateKernel
        ));
    }
}
