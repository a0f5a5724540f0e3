//! Full-rank graph DKM objective
//! `L(G^1..G^L) = log P(Y | G^L) - sum_l nu_l KL(N(0,G^l) || N(0, A K(G^{l-1}) A^T))`,
//! as a plain evaluation (the compositional oracle) and as a gradient tape
//! for gradient descent and stationarity checks.

use super::{kl_gaussian, DkmError, Result};
use crate::graphops::NormalizedAdjacency;
use crate::kernels::{self, BaseKernel};
use crate::numerics::{cholesky, solve_lower_left, JitterPolicy, Mat, SpdMatrix};
use crate::tape::{Tape, Var};

/// Default observation noise of the Gaussian regression likelihood.
pub const DEFAULT_REGRESSION_NOISE: f64 = 1e-3;

/// Top-layer likelihood of the full-rank objective.
#[derive(Debug, Clone)]
pub enum FullRankLikelihood {
    /// Gaussian regression `sum_l log N(y_l; 0, K(G^L) + sigma^2 I)`.
    GaussianRegression { y: Mat, sigma2: f64 },
    /// Output-kernel form used by the linear analysis: the top layer is a
    /// KL term `-KL(N(0, G_out) || N(0, A K(G^L) A^T))` with a known
    /// (positive definite) label kernel `G_out`.
    LabelKernelKl { g_out: SpdMatrix },
}

fn prior_cov(g_prev: &SpdMatrix, a: &NormalizedAdjacency, base: BaseKernel) -> Result<SpdMatrix> {
    let k = base.apply(g_prev);
    Ok(kernels::graph_conv(&k, a)?)
}

/// Plain evaluation of the full-rank objective. `grams` are `G^1..G^L`;
/// layers with infinite `nu` are replaced by the hard NNGP recursion
/// (forward substitution) and contribute no KL term.
pub fn full_rank_objective(
    grams: &[SpdMatrix],
    g0: &SpdMatrix,
    a: &NormalizedAdjacency,
    nu: &[f64],
    base: BaseKernel,
    likelihood: &FullRankLikelihood,
) -> Result<f64> {
    assert_eq!(grams.len(), nu.len());
    let mut effective: Vec<SpdMatrix> = Vec::with_capacity(grams.len());
    let mut obj = 0.0;
    for (l, g) in grams.iter().enumerate() {
        let prev = if l == 0 { g0 } else { &effective[l - 1] };
        let prior = prior_cov(prev, a, base)?;
        if nu[l].is_infinite() {
            effective.push(prior);
            continue;
        }
        let kl = kl_gaussian(g, &prior).map_err(|e| match e {
            DkmError::SingularK => DkmError::SingularPrior(format!("layer {l} prior")),
            other => other,
        })?;
        obj -= nu[l] * kl;
        effective.push(g.clone());
    }
    let g_top = effective.last().cloned().unwrap_or_else(|| g0.clone());
    obj += match likelihood {
        FullRankLikelihood::GaussianRegression { y, sigma2 } => {
            let k = base.apply(&g_top);
            let s = SpdMatrix::new(k.as_mat() + &(*sigma2 * Mat::eye(k.dim())))?;
            let hs = cholesky(&s, &JitterPolicy::none())
                .map_err(|_| DkmError::SingularPrior("output covariance".into()))?
                .factor;
            let v = solve_lower_left(hs.as_mat(), y);
            let quad: f64 = v.iter().map(|x| x * x).sum();
            let logdet = crate::numerics::logdet_from_chol(&hs)?;
            let c = y.ncols() as f64;
            let p = y.nrows() as f64;
            -0.5 * (quad + c * logdet + c * p * (2.0 * std::f64::consts::PI).ln())
        }
        FullRankLikelihood::LabelKernelKl { g_out } => {
            let prior = prior_cov(&g_top, a, base)?;
            -kl_gaussian(g_out, &prior).map_err(|e| match e {
                DkmError::SingularK => DkmError::SingularPrior("output prior".into()),
                other => other,
            })?
        }
    };
    Ok(obj)
}

/// A built full-rank objective tape: Gram leaves (raw symmetric matrices or
/// `M M^T` factors) plus the scalar objective to maximize.
pub struct FullRankTape {
    pub tape: Tape,
    pub param_vars: Vec<Var>,
    pub objective: Var,
}

/// On-tape KL `KL(N(0,G) || N(0,S)) = (|Hs^-1 Hg|_F^2 - logdet G + logdet S - P)/2`.
fn kl_on_tape(tape: &mut Tape, g: Var, s: Var, jitter: &[f64]) -> Result<Var> {
    let p = tape.value(g).nrows() as f64;
    let hs = tape.cholesky(s, jitter)?;
    let hg = tape.cholesky(g, jitter)?;
    let v = tape.solve_lower_left(hs, hg);
    let trace = tape.dot(v, v);
    let ld_g = tape.sum_log_diag(hg)?;
    let ld_s = tape.sum_log_diag(hs)?;
    let t1 = tape.scale(trace, 0.5);
    let t2 = tape.sub(ld_s, ld_g);
    let t3 = tape.add(t1, t2);
    Ok(tape.add_const(t3, -0.5 * p))
}

fn base_on_tape(tape: &mut Tape, g: Var, base: BaseKernel) -> Var {
    match base {
        BaseKernel::Linear => g,
        BaseKernel::Arccos => tape.arccos_full(g),
    }
}

/// Builds the full-rank objective as a tape over Gram parameters.
///
/// With `factored = false` the leaves are the raw Gram matrices themselves
/// (used for stationarity checks); with `factored = true` each leaf is a
/// square factor `M^l` and the layer Gram is `M M^T` (used for gradient
/// descent, which must preserve positive definiteness).
#[allow(clippy::too_many_arguments)]
pub fn build_full_rank_tape(
    init: &[Mat],
    g0: &SpdMatrix,
    a: &NormalizedAdjacency,
    nu: &[f64],
    base: BaseKernel,
    likelihood: &FullRankLikelihood,
    factored: bool,
    jitter: &[f64],
) -> Result<FullRankTape> {
    assert_eq!(init.len(), nu.len());
    assert!(
        nu.iter().all(|v| v.is_finite()),
        "tape path requires finite nu (use forward substitution first)"
    );
    let mut tape = Tape::new();
    let a_dense = tape.constant(a.to_dense());
    let g0_var = tape.constant(g0.as_mat().clone());
    let mut param_vars = Vec::with_capacity(init.len());
    let mut gram_vars = Vec::with_capacity(init.len());
    for m in init {
        let leaf = tape.param(m.clone());
        param_vars.push(leaf);
        if factored {
            let mt = tape.transpose(leaf);
            gram_vars.push(tape.matmul(leaf, mt));
        } else {
            gram_vars.push(leaf);
        }
    }
    let sandwich = |tape: &mut Tape, k: Var| {
        let ak = tape.matmul(a_dense, k);
        let at = tape.transpose(a_dense);
        tape.matmul(ak, at)
    };
    let mut objective: Option<Var> = None;
    for l in 0..gram_vars.len() {
        let prev = if l == 0 { g0_var } else { gram_vars[l - 1] };
        let k_prev = base_on_tape(&mut tape, prev, base);
        let prior = sandwich(&mut tape, k_prev);
        let kl = kl_on_tape(&mut tape, gram_vars[l], prior, jitter)?;
        let term = tape.scale(kl, nu[l]);
        objective = Some(match objective {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let g_top = *gram_vars.last().unwrap_or(&g0_var);
    let neg_loglik = match likelihood {
        FullRankLikelihood::GaussianRegression { y, sigma2 } => {
            let k = base_on_tape(&mut tape, g_top, base);
            let s = tape.add_scaled_identity(k, *sigma2);
            let hs = tape.cholesky(s, jitter)?;
            let y_var = tape.constant(y.clone());
            let v = tape.solve_lower_left(hs, y_var);
            let quad = tape.dot(v, v);
            let ld = tape.sum_log_diag(hs)?;
            let c = y.ncols() as f64;
            let t1 = tape.scale(quad, 0.5);
            let t2 = tape.scale(ld, c);
            let t3 = tape.add(t1, t2);
            tape.add_const(
                t3,
                0.5 * c * y.nrows() as f64 * (2.0 * std::f64::consts::PI).ln(),
            )
        }
        FullRankLikelihood::LabelKernelKl { g_out } => {
            let k = base_on_tape(&mut tape, g_top, base);
            let prior = sandwich(&mut tape, k);
            let g_out_var = tape.constant(g_out.as_mat().clone());
            kl_on_tape(&mut tape, g_out_var, prior, jitter)?
        }
    };
    let total_kl = objective.unwrap_or_else(|| tape.constant_scalar(0.0));
    let neg_obj = tape.add(total_kl, neg_loglik);
    let objective = tape.scale(neg_obj, -1.0);
    Ok(FullRankTape {
        tape,
        param_vars,
        objective,
    })
}
