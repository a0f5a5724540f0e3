//! Graph convolutional deep kernel machines: the full-rank objective, the
//! sparse inducing-point ELBO with its Cholesky parameterization, top-layer
//! likelihoods, and the analytic solver for the linear case.

mod checkpoint;
mod closed_form;
mod full_rank;
mod sparse;

pub(crate) use checkpoint::fnv1a as checkpoint_fnv1a;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use closed_form::linear_closed_form;
pub use full_rank::{
    build_full_rank_tape, full_rank_objective, FullRankLikelihood, FullRankTape,
    DEFAULT_REGRESSION_NOISE,
};
pub use sparse::{
    accuracy, build_sparse_objective, head_log_likelihood, predict_probs, sparse_forward,
    sparse_objective, KernelStack, LayerBlocks, McNoise, PreparedGraph, SparseParts,
};

use crate::graphops::{CsrMatrix, GraphError, NormalizedAdjacency};
use crate::kernels::{BaseKernel, CenteringParams, KernelError};
use crate::numerics::{
    cholesky, logdet_from_chol, solve_lower_left, JitterPolicy, LowerTriangular, Mat,
    NumericsError, SpdMatrix,
};
use crate::tape::TapeError;
use rand::seq::SliceRandom;
use serde::de::Error as _;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DkmError {
    #[error("prior covariance is singular (lambda = 0 pathology?): {0}")]
    SingularPrior(String),
    #[error("kernel matrix K is singular in a KL term")]
    SingularK,
    #[error("interpolated adjacency is numerically singular (min |eig| {0:.3e})")]
    SingularAdjacency(f64),
    #[error("variational covariance is degenerate: {0}")]
    DegenerateSigma(String),
    #[error("closed-form result asymmetry {resid:.3e} exceeds 1e-8")]
    AsymmetricResult { resid: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, DkmError>;

/// Per-layer regularization strength; `inf` recovers the NNGP (the layer's
/// Gram parameter is frozen at the identity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nu(pub f64);

impl Nu {
    pub fn finite(v: f64) -> Self {
        assert!(v >= 0.0, "nu must be non-negative");
        Nu(v)
    }

    pub fn infinite() -> Self {
        Nu(f64::INFINITY)
    }

    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl serde::Serialize for Nu {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> serde::Deserialize<'de> for Nu {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v >= 0.0 => Ok(Nu(v)),
            Raw::Num(v) => Err(D::Error::custom(format!("nu must be >= 0, got {v}"))),
            Raw::Str(s) if s == "inf" || s == "Infinity" => Ok(Nu(f64::INFINITY)),
            Raw::Str(s) => Err(D::Error::custom(format!("invalid nu value {s:?}"))),
        }
    }
}

/// How the test-test Gram block is propagated through the layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GttMode {
    /// Low-rank reconstruction `G_tt = F_t F_t^T` (the training default).
    Nystrom,
    /// Full correction `K_tt - K_ti K_ii^-1 K_it + F_t F_t^T`.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    /// Inducing nodes are disconnected from the graph: `A_ii = I`, `A_ti = 0`.
    Inter,
    /// Inducing nodes are a sampled subset of graph nodes carrying the
    /// corresponding rows/columns of the normalized adjacency.
    Intra,
}

/// Inducing-point scheme: the adjacency blocks that connect inducing points
/// to each other and to the test/train nodes.
#[derive(Debug, Clone)]
pub struct InducingScheme {
    pub kind: SchemeKind,
    /// Sampled node indices (intra-domain only).
    pub indices: Option<Vec<usize>>,
    pub a_ii: Rc<CsrMatrix>,
    pub a_ii_t: Rc<CsrMatrix>,
    pub a_ti: Rc<CsrMatrix>,
    pub a_it: Rc<CsrMatrix>,
    pub a_tt: Rc<CsrMatrix>,
}

impl InducingScheme {
    pub fn inter(p_i: usize, a: &NormalizedAdjacency) -> Self {
        let id = Rc::new(CsrMatrix::identity(p_i));
        Self {
            kind: SchemeKind::Inter,
            indices: None,
            a_ii: id.clone(),
            a_ii_t: id,
            a_ti: Rc::new(CsrMatrix::zeros(a.dim(), p_i)),
            a_it: Rc::new(CsrMatrix::zeros(p_i, a.dim())),
            a_tt: Rc::new(a.matrix().clone()),
        }
    }

    pub fn intra(indices: Vec<usize>, a: &NormalizedAdjacency) -> Self {
        let all: Vec<usize> = (0..a.dim()).collect();
        let a_ii = Rc::new(a.matrix().submatrix(&indices, &indices));
        let a_ti = Rc::new(a.matrix().submatrix(&all, &indices));
        let a_it = Rc::new(a_ti.transpose());
        let a_ii_t = Rc::new(a_ii.transpose());
        Self {
            kind: SchemeKind::Intra,
            indices: Some(indices),
            a_ii,
            a_ii_t,
            a_ti,
            a_it,
            a_tt: Rc::new(a.matrix().clone()),
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.a_ii.nrows()
    }

    pub fn is_inter(&self) -> bool {
        matches!(self.kind, SchemeKind::Inter)
    }
}

/// Gaussian variational head over output weights: columns `w_l ~ N(mu_l, Sigma)`
/// with a shared covariance parameterized by its Cholesky factor.
#[derive(Debug, Clone)]
pub struct VariationalHead {
    /// P_i x num_classes mean.
    pub mu: Mat,
    /// P_i x P_i lower-triangular factor of Sigma (strict upper ignored).
    pub sigma_chol: Mat,
    pub mc_train: usize,
    pub mc_eval: usize,
}

impl VariationalHead {
    pub fn init(p_i: usize, num_classes: usize) -> Self {
        Self {
            mu: Mat::zeros((p_i, num_classes)),
            sigma_chol: Mat::eye(p_i),
            mc_train: 1,
            mc_eval: 16,
        }
    }

    /// Closed-form `sum_l KL(N(mu_l, Sigma) || N(0, I))`.
    pub fn weight_kl(&self) -> Result<f64> {
        let p_i = self.sigma_chol.nrows();
        let c = self.mu.ncols() as f64;
        let mu_sq: f64 = self.mu.iter().map(|v| v * v).sum();
        let mut tr = 0.0;
        let mut logdet = 0.0;
        for i in 0..p_i {
            for j in 0..=i {
                tr += self.sigma_chol[[i, j]] * self.sigma_chol[[i, j]];
            }
            let d = self.sigma_chol[[i, i]];
            if d <= 0.0 || d.is_nan() {
                return Err(DkmError::DegenerateSigma(format!(
                    "sigma factor diagonal {d:.3e} at row {i}"
                )));
            }
            logdet += 2.0 * d.ln();
        }
        Ok(0.5 * mu_sq + 0.5 * c * (tr - logdet - p_i as f64))
    }
}

/// Identifies one trainable tensor of a [`DkmModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSlot {
    /// Lower-triangular Gram parameter of layer `l` (0-based).
    Layer(usize),
    Mu,
    SigmaChol,
    /// Centering scale of layer `l`.
    Gamma(usize),
    /// Centering bias of layer `l`.
    Beta(usize),
}

/// Sparse graph convolutional DKM model state.
#[derive(Debug, Clone)]
pub struct DkmModel {
    pub depth: usize,
    /// Per-layer regularization, length `depth`.
    pub nu: Vec<Nu>,
    pub base_kernel: BaseKernel,
    pub gtt_mode: GttMode,
    /// Inducing inputs, P_i x nu0. Fixed after initialization.
    pub x_inducing: Mat,
    /// Per-layer lower-triangular parameters, each P_i x P_i. Layers with
    /// `nu = inf` stay frozen at the identity.
    pub layer_params: Vec<Mat>,
    pub head: VariationalHead,
    /// Per-layer centering configuration, length `depth`.
    pub centering: Vec<CenteringParams>,
}

impl DkmModel {
    /// NNGP-point initialization: `L^l = I`, `mu = 0`, `Sigma = I`.
    pub fn init(
        depth: usize,
        nu: Vec<Nu>,
        base_kernel: BaseKernel,
        gtt_mode: GttMode,
        x_inducing: Mat,
        num_classes: usize,
        centering: Vec<CenteringParams>,
    ) -> Self {
        assert_eq!(nu.len(), depth);
        assert_eq!(centering.len(), depth);
        let p_i = x_inducing.nrows();
        Self {
            depth,
            nu,
            base_kernel,
            gtt_mode,
            x_inducing,
            layer_params: (0..depth).map(|_| Mat::eye(p_i)).collect(),
            head: VariationalHead::init(p_i, num_classes),
            centering,
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.x_inducing.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.head.mu.ncols()
    }

    /// Order of the trainable tensors: the lower-triangular layer parameters
    /// (finite-nu layers only), the head mean, the head covariance factor,
    /// then any learned centering scales/biases.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for l in 0..self.depth {
            if !self.nu[l].is_infinite() {
                slots.push(ParamSlot::Layer(l));
            }
        }
        slots.push(ParamSlot::Mu);
        slots.push(ParamSlot::SigmaChol);
        for l in 0..self.depth {
            if self.centering[l].enabled && self.centering[l].learn_affine {
                slots.push(ParamSlot::Gamma(l));
                slots.push(ParamSlot::Beta(l));
            }
        }
        slots
    }

    pub fn get_param(&self, slot: &ParamSlot) -> Mat {
        match slot {
            ParamSlot::Layer(l) => self.layer_params[*l].clone(),
            ParamSlot::Mu => self.head.mu.clone(),
            ParamSlot::SigmaChol => self.head.sigma_chol.clone(),
            ParamSlot::Gamma(l) => Mat::from_elem((1, 1), self.centering[*l].gamma),
            ParamSlot::Beta(l) => Mat::from_elem((1, 1), self.centering[*l].beta),
        }
    }

    pub fn set_param(&mut self, slot: &ParamSlot, value: Mat) {
        match slot {
            ParamSlot::Layer(l) => self.layer_params[*l] = value,
            ParamSlot::Mu => self.head.mu = value,
            ParamSlot::SigmaChol => self.head.sigma_chol = value,
            ParamSlot::Gamma(l) => self.centering[*l].gamma = value[[0, 0]],
            ParamSlot::Beta(l) => self.centering[*l].beta = value[[0, 0]],
        }
    }

    pub fn snapshot_params(&self) -> Vec<Mat> {
        self.param_layout()
            .iter()
            .map(|s| self.get_param(s))
            .collect()
    }

    pub fn restore_params(&mut self, params: &[Mat]) {
        let layout = self.param_layout();
        assert_eq!(layout.len(), params.len());
        for (slot, value) in layout.iter().zip(params.iter()) {
            self.set_param(slot, value.clone());
        }
    }
}

/// Samples `p_i` distinct feature rows as inducing inputs (repeating rows
/// only when `p_i` exceeds the node count). Returns the chosen row indices
/// and the stacked inputs.
pub fn sample_inducing_rows(x: &Mat, p_i: usize, seed: u64) -> (Vec<usize>, Mat) {
    let mut rng = crate::graphops::rng_for(seed, crate::graphops::RngPurpose::InducingInit);
    let n = x.nrows();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let chosen: Vec<usize> = if p_i <= n {
        rows[..p_i].to_vec()
    } else {
        (0..p_i).map(|k| rows[k % n]).collect()
    };
    let mut x_inducing = Mat::zeros((p_i, x.ncols()));
    for (r, &src) in chosen.iter().enumerate() {
        for c in 0..x.ncols() {
            x_inducing[[r, c]] = x[[src, c]];
        }
    }
    (chosen, x_inducing)
}

/// `KL(N(0, g) || N(0, k)) = (Tr(k^-1 g) - log det(k^-1 g) - P) / 2`.
///
/// Returns `+inf` when `g` is singular; errors when `k` is.
pub fn kl_gaussian(g: &SpdMatrix, k: &SpdMatrix) -> Result<f64> {
    if g.dim() != k.dim() {
        return Err(DkmError::DimensionMismatch(format!(
            "KL between {}x{} and {}x{}",
            g.dim(),
            g.dim(),
            k.dim(),
            k.dim()
        )));
    }
    let p = g.dim() as f64;
    let hk = cholesky(k, &JitterPolicy::none()).map_err(|_| DkmError::SingularK)?;
    let hg = match cholesky(g, &JitterPolicy::none()) {
        Ok(out) => out,
        Err(_) => return Ok(f64::INFINITY),
    };
    let v = solve_lower_left(hk.factor.as_mat(), hg.factor.as_mat());
    let trace: f64 = v.iter().map(|x| x * x).sum();
    let logdet_k = logdet_from_chol(&hk.factor)?;
    let logdet_g = logdet_from_chol(&hg.factor)?;
    Ok(0.5 * (trace - (logdet_g - logdet_k) - p))
}

/// Gram parameterization relative to a prior kernel: `G_ii = H L L^T H^T`
/// with `H = chol(k_ii)`. Returns the Gram matrix and the exact shortcut
/// `log det(K_ii^-1 G_ii) = 2 sum_j log L_jj`.
pub fn gram_from_params(l_param: &LowerTriangular, k_ii: &SpdMatrix) -> Result<(SpdMatrix, f64)> {
    if l_param.dim() != k_ii.dim() {
        return Err(DkmError::DimensionMismatch(format!(
            "parameter is {}x{} but kernel is {}x{}",
            l_param.dim(),
            l_param.dim(),
            k_ii.dim(),
            k_ii.dim()
        )));
    }
    let h = cholesky(k_ii, &JitterPolicy::none())?.factor;
    let hl = h.as_mat().dot(l_param.as_mat());
    let g = hl.dot(&hl.t());
    let logdet_ratio = logdet_from_chol(l_param)?;
    Ok((SpdMatrix::from_symmetrized(g)?, logdet_ratio))
}
