//! Fixed-kernel recursions: the fully-connected NNGP, its graph
//! convolutional variant `G^l = A_hat K(G^{l-1}) A_hat^T`, and the sparse
//! block form used with inducing points.

use crate::graphops::CsrMatrix;
use crate::graphops::NormalizedAdjacency;
use crate::kernels::{self, BaseKernel, BlockGram, KernelError};
use crate::numerics::{Mat, SpdMatrix};

#[derive(Debug, Clone)]
pub struct NngpConfig {
    /// Number of kernel/mixup layers L (>= 1).
    pub depth: usize,
    pub base_kernel: BaseKernel,
    pub adjacency: NormalizedAdjacency,
}

/// Input Gram matrix `(1/nu0) X X^T`.
pub fn input_gram(x: &Mat) -> SpdMatrix {
    let nu0 = x.ncols().max(1) as f64;
    let g = x.dot(&x.t()) / nu0;
    SpdMatrix::from_symmetrized(g).expect("X X^T is symmetric")
}

/// Graph convolutional NNGP recursion; returns all intermediate kernels
/// `G^1 .. G^L` with `G^l = A_hat K(G^{l-1}) A_hat^T`.
pub fn nngp_forward(x_gram: &SpdMatrix, cfg: &NngpConfig) -> Result<Vec<SpdMatrix>, KernelError> {
    let mut grams = Vec::with_capacity(cfg.depth);
    let mut current = x_gram.clone();
    for _ in 0..cfg.depth {
        let k = cfg.base_kernel.apply(&current);
        current = kernels::graph_conv(&k, &cfg.adjacency)?;
        grams.push(current.clone());
    }
    Ok(grams)
}

/// Blockwise graph convolutional NNGP over an inducing partition:
/// `K^l = [[A]] Phi(K^{l-1}) [[A]]^T` per layer, carrying full tt blocks.
pub fn nngp_forward_sparse(
    g0: &BlockGram,
    depth: usize,
    base_kernel: BaseKernel,
    a_ii: &CsrMatrix,
    a_ti: &CsrMatrix,
    a_tt: &CsrMatrix,
) -> Result<Vec<BlockGram>, KernelError> {
    let mut grams = Vec::with_capacity(depth);
    let mut current = g0.clone();
    for _ in 0..depth {
        let phi = base_kernel.apply_block(&current);
        current = kernels::graph_conv_block(&phi, a_ii, a_ti, a_tt)?;
        grams.push(current.clone());
    }
    Ok(grams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphops::{erdos_renyi, normalize_kipf, EdgeList};
    use crate::kernels::GttBlock;
    use crate::numerics::sym_eig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn random_features(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = Mat::zeros((n, d));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        x
    }

    fn identity_adjacency(n: usize) -> NormalizedAdjacency {
        normalize_kipf(&EdgeList::new(&[], n).unwrap())
    }

    #[test]
    fn linear_identity_adjacency_is_constant() {
        let g0 = input_gram(&random_features(5, 8, 0));
        let cfg = NngpConfig {
            depth: 3,
            base_kernel: BaseKernel::Linear,
            adjacency: identity_adjacency(5),
        };
        let grams = nngp_forward(&g0, &cfg).unwrap();
        for g in &grams {
            assert!(max_abs_diff(g.as_mat(), g0.as_mat()) < 1e-14);
        }
    }

    #[test]
    fn linear_recursion_matches_explicit_adjacency_powers() {
        // G^l = A^l G0 A^l for the linear kernel
        let n = 10;
        let a = normalize_kipf(&erdos_renyi(n, 0.3, 17));
        let g0 = input_gram(&random_features(n, 6, 1));
        let cfg = NngpConfig {
            depth: 3,
            base_kernel: BaseKernel::Linear,
            adjacency: a.clone(),
        };
        let grams = nngp_forward(&g0, &cfg).unwrap();
        let ad = a.to_dense();
        let mut apow = Mat::eye(n);
        for (l, g) in grams.iter().enumerate() {
            apow = apow.dot(&ad);
            let explicit = apow.dot(g0.as_mat()).dot(&apow.t());
            assert!(
                max_abs_diff(g.as_mat(), &explicit) < 1e-10,
                "layer {l} deviates from closed form"
            );
        }
    }

    #[test]
    fn arccos_identity_adjacency_single_step() {
        let g0 = SpdMatrix::identity(2);
        let cfg = NngpConfig {
            depth: 1,
            base_kernel: BaseKernel::Arccos,
            adjacency: identity_adjacency(2),
        };
        let grams = nngp_forward(&g0, &cfg).unwrap();
        let g1 = grams[0].as_mat();
        assert!((g1[[0, 0]] - 1.0).abs() < 1e-14);
        assert!((g1[[0, 1]] - 1.0 / std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn every_layer_stays_symmetric_psd() {
        let n = 12;
        let a = normalize_kipf(&erdos_renyi(n, 0.3, 23));
        let g0 = input_gram(&random_features(n, 5, 2));
        let cfg = NngpConfig {
            depth: 4,
            base_kernel: BaseKernel::Arccos,
            adjacency: a,
        };
        for g in nngp_forward(&g0, &cfg).unwrap() {
            let (w, _) = sym_eig(&g).unwrap();
            let wmax = w[0].max(1.0);
            assert!(w.iter().all(|&x| x >= -1e-10 * wmax));
        }
    }

    #[test]
    fn sparse_inter_domain_single_layer_preserves_ii() {
        // A_ii = I, A_ti = 0: K_ii^1 = Phi(K_ii^0)
        let x = random_features(9, 4, 3);
        let g_full = input_gram(&x);
        let g0 = BlockGram::split(g_full.as_mat(), 3);
        let a_tt = normalize_kipf(&erdos_renyi(6, 0.4, 5));
        let out = nngp_forward_sparse(
            &g0,
            1,
            BaseKernel::Arccos,
            &CsrMatrix::identity(3),
            &CsrMatrix::zeros(6, 3),
            a_tt.matrix(),
        )
        .unwrap();
        let phi_ii =
            crate::kernels::arccos_kernel(&SpdMatrix::from_symmetrized(g0.g_ii.clone()).unwrap());
        assert!(max_abs_diff(&out[0].g_ii, phi_ii.as_mat()) < 1e-12);
    }

    #[test]
    fn sparse_intra_matches_dense_recursion_on_assembled_operator() {
        // the blockwise recursion must introduce no approximation relative
        // to the dense recursion over the assembled augmented operator
        let n = 7;
        let p_i = 3;
        let e = erdos_renyi(n, 0.5, 31);
        let a = normalize_kipf(&e);
        let x = random_features(n, 4, 6);
        let inducing: Vec<usize> = vec![0, 3, 5];
        let all: Vec<usize> = (0..n).collect();
        let a_ii = a.matrix().submatrix(&inducing, &inducing);
        let a_ti = a.matrix().submatrix(&all, &inducing);

        let mut x2 = Mat::zeros((p_i + n, 4));
        for (row, &s) in inducing.iter().enumerate() {
            for j in 0..4 {
                x2[[row, j]] = x[[s, j]];
            }
        }
        for i in 0..n {
            for j in 0..4 {
                x2[[p_i + i, j]] = x[[i, j]];
            }
        }
        let g0 = BlockGram::split(input_gram(&x2).as_mat(), p_i);
        let sparse =
            nngp_forward_sparse(&g0, 2, BaseKernel::Arccos, &a_ii, &a_ti, a.matrix()).unwrap();

        // dense oracle over the assembled (P_i + P_t) operator
        let m = p_i + n;
        let mut a_full = Mat::zeros((m, m));
        let aii = a_ii.to_dense();
        let ati = a_ti.to_dense();
        let att = a.to_dense();
        for i in 0..p_i {
            for j in 0..p_i {
                a_full[[i, j]] = aii[[i, j]];
            }
        }
        for u in 0..n {
            for j in 0..p_i {
                a_full[[p_i + u, j]] = ati[[u, j]];
                a_full[[j, p_i + u]] = ati[[u, j]];
            }
        }
        for u in 0..n {
            for v in 0..n {
                a_full[[p_i + u, p_i + v]] = att[[u, v]];
            }
        }
        let mut dense = input_gram(&x2).into_mat();
        for (l, blocks) in sparse.iter().enumerate() {
            let phi =
                crate::kernels::arccos_kernel(&SpdMatrix::from_symmetrized(dense.clone()).unwrap());
            dense = a_full.dot(phi.as_mat()).dot(&a_full.t());
            let assembled = blocks.assemble().unwrap();
            assert!(
                max_abs_diff(&assembled, &dense) < 1e-10,
                "layer {l} deviates from the dense oracle"
            );
        }
    }

    #[test]
    fn sparse_zero_test_nodes_reduces_to_inducing_recursion() {
        let x = random_features(4, 3, 9);
        let g_ii = input_gram(&x);
        let g0 = BlockGram {
            g_ii: g_ii.as_mat().clone(),
            g_ti: Mat::zeros((0, 4)),
            g_tt: GttBlock::Full(Mat::zeros((0, 0))),
        };
        let out = nngp_forward_sparse(
            &g0,
            2,
            BaseKernel::Arccos,
            &CsrMatrix::identity(4),
            &CsrMatrix::zeros(0, 4),
            &CsrMatrix::identity(0),
        )
        .unwrap();
        let cfg = NngpConfig {
            depth: 2,
            base_kernel: BaseKernel::Arccos,
            adjacency: identity_adjacency(4),
        };
        let dense = nngp_forward(&g_ii, &cfg).unwrap();
        for (l, b) in out.iter().enumerate() {
            assert!(max_abs_diff(&b.g_ii, dense[l].as_mat()) < 1e-12);
        }
    }
}
