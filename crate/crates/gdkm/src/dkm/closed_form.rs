//! Closed-form optimum of the linear-kernel graph DKM objective at nu = 1:
//!
//! `G^l = A^{l-1} ((A^{-L} G^{L+1} A^{-L}) (A G^0 A)^{-1})^{l/(L+1)} (A G^0 A) A^{l-1}`
//!
//! The fractional power of the (nonsymmetric) product `C = M N^{-1}` of two
//! SPD matrices is evaluated through the similarity
//! `C^p = N^{1/2} (N^{-1/2} M N^{-1/2})^p N^{-1/2}`, so only symmetric
//! eigendecompositions are needed and the result is symmetric PSD by
//! construction.

use super::{DkmError, Result};
use crate::graphops::NormalizedAdjacency;
use crate::numerics::{frac_power, max_asymmetry, sym_eig, Mat, SpdMatrix};

/// Spectral decomposition of the (symmetric, possibly indefinite)
/// interpolated adjacency, for exact integer powers.
struct AdjacencyEig {
    vectors: Mat,
    values: Vec<f64>,
}

impl AdjacencyEig {
    fn new(a: &NormalizedAdjacency) -> Result<Self> {
        let dense = a.to_dense();
        let spd_like = SpdMatrix::new(dense)?; // symmetric; eigenvalues may be negative
        let (values, vectors) = sym_eig(&spd_like)?;
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min <= 1e-12 * max.max(1e-300) {
            return Err(DkmError::SingularAdjacency(min));
        }
        Ok(Self { vectors, values })
    }

    /// `A^k` for integer k (negative powers allowed).
    fn power(&self, k: i64) -> Mat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let w = self.values[j].powi(k as i32);
            for i in 0..n {
                scaled[[i, j]] *= w;
            }
        }
        scaled.dot(&self.vectors.t())
    }
}

/// Square root and inverse square root of an SPD matrix.
fn spd_sqrt_pair(m: &SpdMatrix) -> Result<(Mat, Mat)> {
    let (w, v) = sym_eig(m)?;
    let wmax = w.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let n = w.len();
    let mut sqrt = v.clone();
    let mut inv_sqrt = v.clone();
    for j in 0..n {
        if w[j] <= 1e-14 * wmax {
            return Err(DkmError::SingularPrior(format!(
                "A G0 A has a near-zero eigenvalue {:.3e}",
                w[j]
            )));
        }
        let s = w[j].sqrt();
        for i in 0..n {
            sqrt[[i, j]] *= s;
            inv_sqrt[[i, j]] /= s;
        }
    }
    Ok((sqrt.dot(&v.t()), inv_sqrt.dot(&v.t())))
}

/// Gram matrix at layer `ell` of an `L`-layer linear graph DKM with nu = 1,
/// given the input kernel `g0` and a positive-definite output kernel
/// `g_out`. The boundary extensions `ell = 0` and `ell = L + 1` reproduce
/// `g0` and `g_out`.
pub fn linear_closed_form(
    g0: &SpdMatrix,
    g_out: &SpdMatrix,
    a_lambda: &NormalizedAdjacency,
    depth: usize,
    ell: usize,
) -> Result<SpdMatrix> {
    let n = g0.dim();
    if g_out.dim() != n || a_lambda.dim() != n {
        return Err(DkmError::DimensionMismatch(format!(
            "g0 {}x{}, g_out {}x{}, adjacency {}x{}",
            n,
            n,
            g_out.dim(),
            g_out.dim(),
            a_lambda.dim(),
            a_lambda.dim()
        )));
    }
    assert!(ell <= depth + 1, "layer index {ell} exceeds depth+1");
    let l = depth as i64;
    let eig = AdjacencyEig::new(a_lambda)?;

    // N = A G0 A, M = A^-L Gout A^-L
    let a1 = eig.power(1);
    let a_neg_l = eig.power(-l);
    let n_mat = a1.dot(g0.as_mat()).dot(&a1);
    let m_mat = a_neg_l.dot(g_out.as_mat()).dot(&a_neg_l);
    let n_spd = SpdMatrix::from_symmetrized(n_mat)?;
    let (n_sqrt, n_inv_sqrt) = spd_sqrt_pair(&n_spd)?;

    // C^p N = N^{1/2} S^p N^{1/2} with S = N^{-1/2} M N^{-1/2}
    let s = n_inv_sqrt.dot(&m_mat).dot(&n_inv_sqrt);
    let s_sym = 0.5 * (&s + &s.t());
    let p = ell as f64 / (depth as f64 + 1.0);
    let s_pow = frac_power(&s_sym, p)?;
    // symmetrize before the outer products: S^p can be huge when the
    // adjacency is nearly singular, and the product roundoff it leaves
    // behind would otherwise dominate the final symmetry residual
    let core = n_sqrt.dot(&s_pow).dot(&n_sqrt);
    let core = 0.5 * (&core + &core.t());

    // G^ell = A^{ell-1} core A^{ell-1}
    let a_side = eig.power(ell as i64 - 1);
    let g = a_side.dot(&core).dot(&a_side);
    let resid = max_asymmetry(&g);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if resid > 1e-8 * scale {
        return Err(DkmError::AsymmetricResult { resid });
    }
    Ok(SpdMatrix::from_symmetrized(g)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphops::{erdos_renyi, interpolate_lambda, normalize_kipf, EdgeList};
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
        SpdMatrix::new(m.dot(&m.t()) + 0.5 * Mat::eye(n)).unwrap()
    }

    fn identity_interp(n: usize) -> NormalizedAdjacency {
        interpolate_lambda(&normalize_kipf(&EdgeList::new(&[], n).unwrap()), 0.5)
    }

    #[test]
    fn boundary_layers_reproduce_inputs() {
        let n = 8;
        let a = interpolate_lambda(&normalize_kipf(&erdos_renyi(n, 0.4, 3)), 0.5);
        let g0 = random_spd(n, 1);
        let g_out = random_spd(n, 2);
        let depth = 2;
        let at0 = linear_closed_form(&g0, &g_out, &a, depth, 0).unwrap();
        assert!(max_abs_diff(at0.as_mat(), g0.as_mat()) < 1e-9);
        let at_top = linear_closed_form(&g0, &g_out, &a, depth, depth + 1).unwrap();
        assert!(max_abs_diff(at_top.as_mat(), g_out.as_mat()) < 1e-9);
    }

    #[test]
    fn identity_adjacency_geodesic_midpoint() {
        // A = I, G0 = I, Gout = 4I, L = 1: G^1 = (4I)^{1/2} = 2I
        let a = identity_interp(3);
        let g0 = SpdMatrix::identity(3);
        let g_out = SpdMatrix::new(4.0 * Mat::eye(3)).unwrap();
        let g1 = linear_closed_form(&g0, &g_out, &a, 1, 1).unwrap();
        assert!(max_abs_diff(g1.as_mat(), &(2.0 * Mat::eye(3))) < 1e-10);
    }

    #[test]
    fn output_is_symmetric_psd() {
        let n = 10;
        let a = interpolate_lambda(&normalize_kipf(&erdos_renyi(n, 0.3, 7)), 0.3);
        let g0 = random_spd(n, 4);
        let g_out = random_spd(n, 5);
        for ell in 1..=2 {
            let g = linear_closed_form(&g0, &g_out, &a, 2, ell).unwrap();
            let (w, _) = sym_eig(&g).unwrap();
            let wmax = w[0].max(1.0);
            assert!(w.iter().all(|&x| x >= -1e-9 * wmax));
        }
    }

    #[test]
    fn lambda_zero_disconnected_graph_can_be_singular() {
        // an empty graph at lambda 0 keeps A = I (self-loops), so this stays
        // invertible; a genuinely singular interpolation must error
        let e = EdgeList::new(&[(0, 1)], 2).unwrap();
        let a = normalize_kipf(&e); // eigenvalues 1 and 0
        let g0 = SpdMatrix::identity(2);
        let g_out = SpdMatrix::new(2.0 * Mat::eye(2)).unwrap();
        let err = linear_closed_form(&g0, &g_out, &a, 1, 1).unwrap_err();
        assert!(matches!(err, DkmError::SingularAdjacency(_)));
    }
}
