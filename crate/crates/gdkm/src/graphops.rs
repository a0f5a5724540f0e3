//! Adjacency construction and normalization, the lambda-interpolated
//! adjacency, edge homophily, synthetic graph generation and multi-graph
//! block batching.
//!
//! Graphs are undirected: input edges are symmetrized and deduplicated, and
//! self-loops only enter through the `A + I` normalization.

use crate::numerics::Mat;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({u},{v}) references a node outside 0..{num_nodes}")]
    EdgeOutOfRange {
        u: usize,
        v: usize,
        num_nodes: usize,
    },
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("labels cover {labels} nodes but the graph has {num_nodes}")]
    LabelLengthMismatch { labels: usize, num_nodes: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Purpose tags for the seeded RNG streams used across the crate.
///
/// Every random draw comes from a ChaCha12 generator keyed by the
/// experiment seed, with the stream number set to the purpose below. This
/// keeps e.g. graph generation identical whether or not weight sampling
/// happens in the same run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngPurpose {
    GraphGeneration = 0,
    Features = 1,
    Labels = 2,
    InducingInit = 3,
    McSampling = 4,
    WishartInit = 5,
    Splits = 6,
}

/// Seeded generator for one purpose stream. Deterministic across platforms
/// and thread counts.
pub fn rng_for(seed: u64, purpose: RngPurpose) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Undirected edge list over `num_nodes` nodes.
///
/// Edges are stored once as canonical `(min, max)` pairs; self-loops are
/// dropped on construction (normalization re-adds them).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    edges: Vec<(usize, usize)>,
    num_nodes: usize,
}

impl EdgeList {
    /// Builds from possibly-directed, possibly-duplicated pairs.
    pub fn new(pairs: &[(usize, usize)], num_nodes: usize) -> Result<Self> {
        let mut edges = Vec::with_capacity(pairs.len());
        for &(u, v) in pairs {
            if u >= num_nodes || v >= num_nodes {
                return Err(GraphError::EdgeOutOfRange { u, v, num_nodes });
            }
            if u == v {
                continue;
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { edges, num_nodes })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical `(u, v)` pairs with `u < v`, each undirected edge once.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Node degrees counting each undirected edge at both endpoints.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

/// Compressed sparse row matrix used for adjacency-like operators.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &mut [(usize, usize, f64)]) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut cur_row = 0usize;
        for &(r, c, v) in triplets.iter() {
            while cur_row < r {
                cur_row += 1;
                indptr[cur_row] = indices.len();
            }
            // duplicates within a row merge additively
            if indices.len() > indptr[r] && *indices.last().unwrap() == c {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
            }
        }
        while cur_row < nrows {
            cur_row += 1;
            indptr[cur_row] = indices.len();
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, &mut triplets)
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] += v;
            }
        }
        out
    }

    /// `self * x` for dense `x`.
    pub fn matmul_dense(&self, x: &Mat) -> Mat {
        assert_eq!(
            self.ncols,
            x.nrows(),
            "spmm dimension mismatch: {}x{} * {}x{}",
            self.nrows,
            self.ncols,
            x.nrows(),
            x.ncols()
        );
        let cols = x.ncols();
        let mut out = Mat::zeros((self.nrows, cols));
        for r in 0..self.nrows {
            let (cis, vals) = self.row(r);
            for (&k, &a) in cis.iter().zip(vals) {
                let xrow = x.row(k);
                let mut orow = out.row_mut(r);
                for j in 0..cols {
                    orow[j] += a * xrow[j];
                }
            }
        }
        out
    }

    /// `x * self^T` for dense `x`.
    pub fn matmul_dense_left_transposed(&self, x: &Mat) -> Mat {
        assert_eq!(
            x.ncols(),
            self.ncols,
            "spmm dimension mismatch: {}x{} * ({}x{})^T",
            x.nrows(),
            x.ncols(),
            self.nrows,
            self.ncols
        );
        let rows = x.nrows();
        let mut out = Mat::zeros((rows, self.nrows));
        for j in 0..self.nrows {
            let (cis, vals) = self.row(j);
            for (&k, &a) in cis.iter().zip(vals) {
                for u in 0..rows {
                    out[[u, j]] += a * x[[u, k]];
                }
            }
        }
        out
    }

    /// `x * self` for dense `x`.
    pub fn matmul_dense_left(&self, x: &Mat) -> Mat {
        assert_eq!(
            x.ncols(),
            self.nrows,
            "spmm dimension mismatch: {}x{} * {}x{}",
            x.nrows(),
            x.ncols(),
            self.nrows,
            self.ncols
        );
        let rows = x.nrows();
        let mut out = Mat::zeros((rows, self.ncols));
        for k in 0..self.nrows {
            let (cis, vals) = self.row(k);
            for (&c, &a) in cis.iter().zip(vals) {
                for u in 0..rows {
                    out[[u, c]] += a * x[[u, k]];
                }
            }
        }
        out
    }

    /// Selects a square submatrix by the given row/column indices.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut col_pos = vec![usize::MAX; self.ncols];
        for (j, &c) in cols.iter().enumerate() {
            col_pos[c] = j;
        }
        let mut triplets = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            let (cis, vals) = self.row(r);
            for (&c, &v) in cis.iter().zip(vals) {
                if col_pos[c] != usize::MAX {
                    triplets.push((i, col_pos[c], v));
                }
            }
        }
        CsrMatrix::from_triplets(rows.len(), cols.len(), &mut triplets)
    }
}

/// Normalization scheme carried by a [`NormalizedAdjacency`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AdjacencyScheme {
    Kipf,
    LambdaInterp,
}

/// Symmetrically normalized adjacency with self-loops,
/// `A_hat = D^-1/2 (A + I) D^-1/2`, optionally interpolated with the
/// identity as `A_lambda = lambda I + (1 - lambda) A_hat`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    matrix: CsrMatrix,
    lambda: f64,
    scheme: AdjacencyScheme,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn scheme(&self) -> AdjacencyScheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_dense(&self) -> Mat {
        self.matrix.to_dense()
    }
}

/// Kipf & Welling renormalization `D^-1/2 (A + I) D^-1/2`.
///
/// Isolated nodes end up with a unit self-loop.
pub fn normalize_kipf(e: &EdgeList) -> NormalizedAdjacency {
    let n = e.num_nodes();
    let mut deg = vec![1.0f64; n]; // self-loop contributes 1 to every degree
    for &(u, v) in e.edges() {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * e.num_edges() + n);
    for (i, s) in inv_sqrt.iter().enumerate() {
        triplets.push((i, i, s * s));
    }
    for &(u, v) in e.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    NormalizedAdjacency {
        matrix: CsrMatrix::from_triplets(n, n, &mut triplets),
        lambda: 0.0,
        scheme: AdjacencyScheme::Kipf,
    }
}

/// `A_lambda = lambda I + (1 - lambda) A_hat` (identity interpolation that
/// guarantees invertibility for lambda > 0).
pub fn interpolate_lambda(a: &NormalizedAdjacency, lambda: f64) -> NormalizedAdjacency {
    assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0,1]");
    if lambda == 0.0 {
        return a.clone();
    }
    let n = a.dim();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(a.matrix.nnz() + n);
    for r in 0..n {
        let (cols, vals) = a.matrix.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            triplets.push((r, c, (1.0 - lambda) * v));
        }
    }
    for i in 0..n {
        triplets.push((i, i, lambda));
    }
    NormalizedAdjacency {
        matrix: CsrMatrix::from_triplets(n, n, &mut triplets),
        lambda,
        scheme: AdjacencyScheme::LambdaInterp,
    }
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(e: &EdgeList, labels: &[usize]) -> Result<f64> {
    if labels.len() != e.num_nodes() {
        return Err(GraphError::LabelLengthMismatch {
            labels: labels.len(),
            num_nodes: e.num_nodes(),
        });
    }
    if e.num_edges() == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let same = e
        .edges()
        .iter()
        .filter(|&&(u, v)| labels[u] == labels[v])
        .count();
    Ok(same as f64 / e.num_edges() as f64)
}

/// Erdős–Rényi graph: each unordered pair is an edge independently with
/// probability `p`. Bit-identical for a fixed seed.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> EdgeList {
    assert!(
        (0.0..=1.0).contains(&p),
        "edge probability must lie in [0,1]"
    );
    let mut rng = rng_for(seed, RngPurpose::GraphGeneration);
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                pairs.push((u, v));
            }
        }
    }
    EdgeList::new(&pairs, n).expect("generated edges are in range")
}

/// Block-diagonal batch of graphs for graph-level tasks.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub edges: EdgeList,
    pub features: Mat,
    /// Half-open node ranges, one per graph, partitioning `0..total_nodes`.
    pub graph_offsets: Vec<(usize, usize)>,
    pub graph_labels: Vec<usize>,
}

impl GraphBatch {
    pub fn num_graphs(&self) -> usize {
        self.graph_offsets.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.edges.num_nodes()
    }

    /// Row-stochastic mean-pool operator: `pool * node_matrix` averages the
    /// rows of each graph. Every row sums to one.
    pub fn mean_pool_matrix(&self) -> CsrMatrix {
        let mut triplets = Vec::new();
        for (g, &(lo, hi)) in self.graph_offsets.iter().enumerate() {
            let w = 1.0 / (hi - lo) as f64;
            triplets.extend((lo..hi).map(|node| (g, node, w)));
        }
        CsrMatrix::from_triplets(self.num_graphs(), self.total_nodes(), &mut triplets)
    }
}

/// Stacks graphs into one block-diagonal structure with per-graph node
/// ranges recorded; no cross-graph edges are created.
pub fn batch_graphs(graphs: &[(EdgeList, Mat, usize)]) -> Result<GraphBatch> {
    assert!(!graphs.is_empty(), "cannot batch zero graphs");
    let feat_dim = graphs[0].1.ncols();
    let mut pairs = Vec::new();
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut labels = Vec::with_capacity(graphs.len());
    let mut total = 0usize;
    for (e, x, _) in graphs {
        if x.ncols() != feat_dim {
            return Err(GraphError::DimensionMismatch(format!(
                "feature dims differ across graphs: {} vs {}",
                x.ncols(),
                feat_dim
            )));
        }
        if x.nrows() != e.num_nodes() {
            return Err(GraphError::DimensionMismatch(format!(
                "{} feature rows for {} nodes",
                x.nrows(),
                e.num_nodes()
            )));
        }
        total += e.num_nodes();
    }
    let mut features = Mat::zeros((total, feat_dim));
    let mut base = 0usize;
    for (e, x, label) in graphs {
        for &(u, v) in e.edges() {
            pairs.push((base + u, base + v));
        }
        for i in 0..e.num_nodes() {
            for j in 0..feat_dim {
                features[[base + i, j]] = x[[i, j]];
            }
        }
        offsets.push((base, base + e.num_nodes()));
        labels.push(*label);
        base += e.num_nodes();
    }
    Ok(GraphBatch {
        edges: EdgeList::new(&pairs, total)?,
        features,
        graph_offsets: offsets,
        graph_labels: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sym_eig, SpdMatrix};

    #[test]
    fn edge_list_symmetrizes_and_dedups() {
        let e = EdgeList::new(&[(0, 1), (1, 0), (1, 1), (2, 1)], 3).unwrap();
        assert_eq!(e.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn edge_list_rejects_out_of_range() {
        assert!(matches!(
            EdgeList::new(&[(0, 3)], 3).unwrap_err(),
            GraphError::EdgeOutOfRange { .. }
        ));
    }

    #[test]
    fn kipf_single_isolated_node() {
        let e = EdgeList::new(&[], 1).unwrap();
        let a = normalize_kipf(&e);
        assert_eq!(a.to_dense(), ndarray::array![[1.0]]);
    }

    #[test]
    fn kipf_two_nodes_one_edge() {
        let e = EdgeList::new(&[(0, 1)], 2).unwrap();
        let a = normalize_kipf(&e).to_dense();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn kipf_path_graph_hand_entry() {
        // path 0-1-2: degrees with self-loops are (2,3,2)
        let e = EdgeList::new(&[(0, 1), (1, 2)], 3).unwrap();
        let a = normalize_kipf(&e).to_dense();
        assert!((a[[0, 1]] - 1.0 / 6.0f64.sqrt()).abs() < 1e-15);
        assert!((a[[1, 0]] - 1.0 / 6.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kipf_is_symmetric_nonnegative_with_bounded_spectrum() {
        let e = erdos_renyi(20, 0.2, 7);
        let dense = normalize_kipf(&e).to_dense();
        for i in 0..20 {
            for j in 0..20 {
                assert!(dense[[i, j]] >= 0.0);
                assert!((dense[[i, j]] - dense[[j, i]]).abs() < 1e-15);
            }
        }
        let (w, _) = sym_eig(&SpdMatrix::new(dense).unwrap()).unwrap();
        assert!(w[0] <= 1.0 + 1e-10, "spectral radius {} > 1", w[0]);
    }

    #[test]
    fn lambda_boundaries() {
        let e = EdgeList::new(&[(0, 1)], 2).unwrap();
        let a = normalize_kipf(&e);
        let id = interpolate_lambda(&a, 1.0).to_dense();
        assert_eq!(id, Mat::eye(2));
        let same = interpolate_lambda(&a, 0.0).to_dense();
        assert_eq!(same, a.to_dense());
    }

    #[test]
    fn lambda_two_node_hand_case() {
        let e = EdgeList::new(&[(0, 1)], 2).unwrap();
        let a = interpolate_lambda(&normalize_kipf(&e), 0.3).to_dense();
        let expected = ndarray::array![[0.65, 0.35], [0.35, 0.65]];
        for (x, y) in a.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_shifts_eigenvalues_affinely() {
        let e = erdos_renyi(12, 0.3, 3);
        let a = normalize_kipf(&e);
        let lam = 0.4;
        let (w0, _) = sym_eig(&SpdMatrix::new(a.to_dense()).unwrap()).unwrap();
        let (w1, _) =
            sym_eig(&SpdMatrix::new(interpolate_lambda(&a, lam).to_dense()).unwrap()).unwrap();
        for (x, y) in w1.iter().zip(w0.iter()) {
            assert!((x - (lam + (1.0 - lam) * y)).abs() < 1e-9);
        }
    }

    #[test]
    fn homophily_all_equal_labels() {
        let e = EdgeList::new(&[(0, 1), (1, 2)], 3).unwrap();
        assert_eq!(edge_homophily(&e, &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn homophily_hand_case_half() {
        let e = EdgeList::new(&[(0, 1), (1, 2)], 3).unwrap();
        assert_eq!(edge_homophily(&e, &[0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn homophily_empty_graph_errors() {
        let e = EdgeList::new(&[], 3).unwrap();
        assert!(matches!(
            edge_homophily(&e, &[0, 0, 0]).unwrap_err(),
            GraphError::EmptyGraph
        ));
    }

    #[test]
    fn homophily_invariant_under_label_permutation() {
        let e = erdos_renyi(15, 0.3, 5);
        let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
        let permuted: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
        assert_eq!(
            edge_homophily(&e, &labels).unwrap(),
            edge_homophily(&e, &permuted).unwrap()
        );
    }

    #[test]
    fn erdos_renyi_extremes() {
        assert_eq!(erdos_renyi(5, 0.0, 1).num_edges(), 0);
        assert_eq!(erdos_renyi(4, 1.0, 1).num_edges(), 6);
    }

    #[test]
    fn erdos_renyi_is_deterministic_per_seed() {
        let a = erdos_renyi(30, 0.2, 99);
        let b = erdos_renyi(30, 0.2, 99);
        assert_eq!(a, b);
        let c = erdos_renyi(30, 0.2, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn erdos_renyi_edge_count_within_three_sigma() {
        // C(50,2) = 1225 pairs at p=0.1: mean 122.5, sigma = sqrt(1225*0.1*0.9)
        let e = erdos_renyi(50, 0.1, 0);
        let mean = 122.5;
        let sigma = (1225.0f64 * 0.1 * 0.9).sqrt();
        let count = e.num_edges() as f64;
        assert!(
            (count - mean).abs() <= 3.0 * sigma,
            "edge count {count} outside 3 sigma of {mean}"
        );
    }

    #[test]
    fn batch_single_graph_offsets() {
        let e = EdgeList::new(&[(0, 1)], 3).unwrap();
        let x = Mat::zeros((3, 2));
        let b = batch_graphs(&[(e, x, 0)]).unwrap();
        assert_eq!(b.graph_offsets, vec![(0, 3)]);
    }

    #[test]
    fn batch_two_graphs_block_diagonal() {
        let g1 = (EdgeList::new(&[(0, 1)], 2).unwrap(), Mat::zeros((2, 1)), 0);
        let g2 = (EdgeList::new(&[(0, 1)], 2).unwrap(), Mat::zeros((2, 1)), 1);
        let b = batch_graphs(&[g1, g2]).unwrap();
        assert_eq!(b.total_nodes(), 4);
        assert_eq!(b.edges.edges(), &[(0, 1), (2, 3)]);
        let dense = normalize_kipf(&b.edges).to_dense();
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(dense[[i, j]], 0.0);
                assert_eq!(dense[[j, i]], 0.0);
            }
        }
    }

    #[test]
    fn mean_pool_rows_sum_to_one() {
        let g1 = (EdgeList::new(&[(0, 1)], 3).unwrap(), Mat::zeros((3, 1)), 0);
        let g2 = (EdgeList::new(&[(0, 1)], 2).unwrap(), Mat::zeros((2, 1)), 1);
        let b = batch_graphs(&[g1, g2]).unwrap();
        let pool = b.mean_pool_matrix().to_dense();
        for g in 0..2 {
            let s: f64 = pool.row(g).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csr_matmul_matches_dense() {
        let e = erdos_renyi(10, 0.4, 2);
        let a = normalize_kipf(&e);
        let dense = a.to_dense();
        let mut x = Mat::zeros((10, 3));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let sp = a.matrix().matmul_dense(&x);
        let dn = dense.dot(&x);
        for (p, q) in sp.iter().zip(dn.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        let spt = a.matrix().matmul_dense_left_transposed(&x.t().to_owned());
        let dnt = x.t().dot(&dense.t());
        for (p, q) in spt.iter().zip(dnt.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        let spl = a.matrix().matmul_dense_left(&x.t().to_owned());
        let dnl = x.t().dot(&dense);
        for (p, q) in spl.iter().zip(dnl.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn csr_submatrix_selects_rows_and_cols() {
        let e = EdgeList::new(&[(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let a = normalize_kipf(&e);
        let dense = a.to_dense();
        let idx = [1usize, 3];
        let sub = a.matrix().submatrix(&idx, &idx).to_dense();
        for (i, &r) in idx.iter().enumerate() {
            for (j, &c) in idx.iter().enumerate() {
                assert_eq!(sub[[i, j]], dense[[r, c]]);
            }
        }
    }
}
