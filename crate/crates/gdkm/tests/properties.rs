//! Property tests for the numeric and graph primitives.

use gdkm::dataio::{load_kernel, save_kernel, scale_features, FeatureScaling};
use gdkm::graphops::{edge_homophily, erdos_renyi, normalize_kipf, EdgeList};
use gdkm::kernels::arccos_kernel;
use gdkm::numerics::{cholesky, frac_power, tri_solve, JitterPolicy, Mat, Side, SpdMatrix};
use proptest::prelude::*;

fn spd_from_seed(n: usize, entries: &[f64]) -> SpdMatrix {
    let mut m = Mat::zeros((n, n));
    for (i, v) in m.iter_mut().enumerate() {
        *v = entries[i % entries.len()] + 0.01 * (i as f64 % 7.0);
    }
    SpdMatrix::from_symmetrized(m.dot(&m.t()) + 0.5 * Mat::eye(n)).unwrap()
}

fn rel_fro(a: &Mat, b: &Mat) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    num / den
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_input_plus_jitter(
        entries in proptest::collection::vec(-2.0f64..2.0, 9..25),
        n in 2usize..7,
    ) {
        let m = spd_from_seed(n, &entries);
        let out = cholesky(&m, &JitterPolicy::default()).unwrap();
        let h = out.factor.as_mat();
        let recon = h.dot(&h.t()) - out.jitter * Mat::eye(n);
        prop_assert!(rel_fro(&recon, m.as_mat()) < 1e-9);
    }

    #[test]
    fn tri_solve_round_trips(
        entries in proptest::collection::vec(-2.0f64..2.0, 9..25),
        n in 2usize..7,
    ) {
        let m = spd_from_seed(n, &entries);
        let h = cholesky(&m, &JitterPolicy::none()).unwrap().factor;
        let mut b = Mat::zeros((n, 3));
        for (i, v) in b.iter_mut().enumerate() {
            *v = entries[i % entries.len()];
        }
        let x = tri_solve(&h, &b, Side::Left, false).unwrap();
        prop_assert!(rel_fro(&h.as_mat().dot(&x), &b) < 1e-10);
        let x = tri_solve(&h, &b, Side::Left, true).unwrap();
        prop_assert!(rel_fro(&h.as_mat().t().dot(&x), &b) < 1e-10);
        let bt = b.t().to_owned();
        let x = tri_solve(&h, &bt, Side::Right, false).unwrap();
        prop_assert!(rel_fro(&x.dot(h.as_mat()), &bt) < 1e-10);
        let x = tri_solve(&h, &bt, Side::Right, true).unwrap();
        prop_assert!(rel_fro(&x.dot(&h.as_mat().t()), &bt) < 1e-10);
    }

    #[test]
    fn frac_power_addition_law(
        entries in proptest::collection::vec(-1.5f64..1.5, 9..25),
        n in 2usize..6,
        a in 0.1f64..0.5,
        b in 0.1f64..0.5,
    ) {
        let m = spd_from_seed(n, &entries).into_mat();
        let pa = frac_power(&m, a).unwrap();
        let pb = frac_power(&m, b).unwrap();
        let pab = frac_power(&m, a + b).unwrap();
        prop_assert!(rel_fro(&pa.dot(&pb), &pab) < 1e-8);
    }

    #[test]
    fn arccos_kernel_preserves_diagonal(
        entries in proptest::collection::vec(-2.0f64..2.0, 9..25),
        n in 2usize..8,
    ) {
        let g = spd_from_seed(n, &entries);
        let k = arccos_kernel(&g);
        for i in 0..n {
            prop_assert!((k.as_mat()[[i, i]] - g.as_mat()[[i, i]]).abs() < 1e-10);
        }
    }

    #[test]
    fn kipf_normalization_is_symmetric_nonnegative(
        n in 2usize..12,
        p in 0.0f64..1.0,
        seed in 0u64..50,
    ) {
        let a = normalize_kipf(&erdos_renyi(n, p, seed)).to_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert!(a[[i, j]] >= 0.0);
                prop_assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn homophily_is_label_permutation_invariant(
        n in 3usize..15,
        p in 0.2f64..0.9,
        seed in 0u64..20,
        shift in 1usize..3,
    ) {
        let e = erdos_renyi(n, p, seed);
        if e.num_edges() == 0 {
            return Ok(());
        }
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let permuted: Vec<usize> = labels.iter().map(|&l| (l + shift) % 3).collect();
        prop_assert_eq!(
            edge_homophily(&e, &labels).unwrap(),
            edge_homophily(&e, &permuted).unwrap()
        );
    }

    #[test]
    fn scale_features_matches_formula(
        rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..5),
    ) {
        let r = rows.len();
        let mut x = Mat::zeros((r, 3));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        let s = scale_features(&x, FeatureScaling::SumSquares);
        for i in 0..r {
            let ss: f64 = (0..3).map(|j| x[[i, j]] * x[[i, j]]).sum();
            for j in 0..3 {
                let expect = if ss == 0.0 { x[[i, j]] } else { x[[i, j]] / ss };
                prop_assert!((s[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_container_round_trip_is_bit_exact(
        vals in proptest::collection::vec(-1e6f64..1e6, 1..30),
        cols in 1usize..6,
    ) {
        let rows = vals.len().div_ceil(cols);
        let mut m = Mat::zeros((rows, cols));
        for (i, v) in m.iter_mut().enumerate() {
            *v = vals[i % vals.len()];
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.gdkm");
        save_kernel(&path, &m).unwrap();
        prop_assert_eq!(load_kernel(&path).unwrap(), m);
    }

    #[test]
    fn edge_list_is_canonical(
        pairs in proptest::collection::vec((0usize..8, 0usize..8), 0..30),
    ) {
        let e = EdgeList::new(&pairs, 8).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &(u, v) in e.edges() {
            prop_assert!(u < v, "canonical order with no self-loops");
            prop_assert!(seen.insert((u, v)), "no duplicates");
        }
    }
}
