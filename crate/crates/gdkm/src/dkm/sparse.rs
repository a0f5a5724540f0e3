//! Sparse inducing-point forward pass and ELBO, built as gradient tapes.
//!
//! Per layer: apply the base kernel blockwise, sandwich with the adjacency
//! blocks, then propagate through the Cholesky parameterization
//! `G_ii = H L L^T H^T`, `F_i = H L`, `F_t = K_ti H^-T L` (a triangular
//! solve), giving `G_ti = F_t F_i^T` and either the Nystrom block
//! `G_tt = F_t F_t^T` or the exact correction. The per-layer KL against the
//! sandwiched prior collapses to `(|L|_F^2 - 2 sum log L_jj - P_i)/2`,
//! which is exact because the prior is the same `K_ii` that parameterizes
//! `G_ii`.

use super::{DkmError, DkmModel, InducingScheme, ParamSlot, Result, VariationalHead};
use crate::dkm::GttMode;
use crate::graphops::{rng_for, CsrMatrix, RngPurpose};
use crate::kernels::{BaseKernel, BlockGram, GttBlock};
use crate::numerics::{cholesky, solve_lower_trans_right, JitterPolicy, Mat, SpdMatrix};
use crate::tape::{Tape, Var};
use std::rc::Rc;

/// Jitter ladder used on tapes (multipliers of the mean diagonal).
pub(crate) const TAPE_JITTER: &[f64] = &[0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Dataset view consumed by the sparse objective: scaled features, the
/// inducing scheme, unit-level targets (units are nodes, or graphs when a
/// mean-pool operator is present) and split indices.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub x_t: Mat,
    pub scheme: InducingScheme,
    pub targets: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub num_classes: usize,
    pub pool: Option<Rc<CsrMatrix>>,
}

impl PreparedGraph {
    pub fn num_nodes(&self) -> usize {
        self.x_t.nrows()
    }

    fn num_units(&self) -> usize {
        match &self.pool {
            Some(p) => p.nrows(),
            None => self.num_nodes(),
        }
    }
}

/// Fixed standard-normal draws for the Monte-Carlo head, one `P_i x C`
/// matrix per sample. Generated from the MC stream so an evaluation is
/// reproducible given `(seed, tag)`.
#[derive(Debug, Clone)]
pub struct McNoise {
    pub samples: Vec<Mat>,
}

impl McNoise {
    pub fn sample(p_i: usize, classes: usize, n_samples: usize, seed: u64, tag: u64) -> Self {
        use rand::Rng;
        let mut rng = rng_for(
            seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            RngPurpose::McSampling,
        );
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut z = Mat::zeros((p_i, classes));
            let mut iter = z.iter_mut();
            // Box-Muller pairs
            while let Some(a) = iter.next() {
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let r = (-2.0 * u1.ln()).sqrt();
                let t = 2.0 * std::f64::consts::PI * u2;
                *a = r * t.cos();
                if let Some(b) = iter.next() {
                    *b = r * t.sin();
                }
            }
            samples.push(z);
        }
        Self { samples }
    }

    /// Zero noise: the head collapses to its mean weights.
    pub fn zeros(p_i: usize, classes: usize) -> Self {
        Self {
            samples: vec![Mat::zeros((p_i, classes))],
        }
    }
}

/// Tape handles for one layer of the sparse forward pass.
pub struct LayerHandles {
    pub k_ii: Var,
    pub k_ti: Var,
    pub k_tt: Option<Var>,
    pub g_ii: Var,
    pub g_ti: Var,
    pub g_tt: Option<Var>,
    pub g_tt_diag: Option<Var>,
    /// Shortcut KL node; present only for layers with finite positive nu.
    pub kl: Option<Var>,
}

/// A built sparse objective: the tape plus handles to everything callers
/// read (objective, likelihood terms, logits, per-layer blocks).
pub struct SparseParts {
    pub tape: Tape,
    /// Trainable leaves aligned with [`DkmModel::param_layout`].
    pub param_vars: Vec<Var>,
    pub objective: Var,
    pub loglik: Var,
    pub weight_kl: Var,
    pub layers: Vec<LayerHandles>,
    pub top_k_ii: Var,
    pub top_k_ti: Var,
    pub sample_logits: Vec<Var>,
    pub logits_mean: Var,
}

/// Per-layer kernel and Gram blocks produced by a forward pass.
pub struct LayerBlocks {
    pub kernel: BlockGram,
    pub gram: BlockGram,
}

/// Forward-pass artifacts as plain matrices: per-layer blocks plus the
/// top-layer kernel (base kernel of `G^L`, no adjacency sandwich).
pub struct KernelStack {
    pub layers: Vec<LayerBlocks>,
    pub top_k_ii: Mat,
    pub top_k_ti: Mat,
}

struct BlockState {
    g_ii: Var,
    g_ti: Var,
    g_tt: Option<Var>,
    g_tt_diag: Option<Var>,
}

/// Builds the sparse graph convolutional DKM objective
/// `E_Q[log P(Y | K(G^L), W)] - sum_l KL(weights) - sum_l nu_l KL(layer)`
/// as a gradient tape.
pub fn build_sparse_objective(
    model: &DkmModel,
    data: &PreparedGraph,
    noise: &McNoise,
) -> Result<SparseParts> {
    let p_i = model.num_inducing();
    let p_t = data.num_nodes();
    let classes = model.num_classes();
    if data.scheme.num_inducing() != p_i {
        return Err(DkmError::DimensionMismatch(format!(
            "scheme has {} inducing nodes but the model has {}",
            data.scheme.num_inducing(),
            p_i
        )));
    }
    if data.x_t.ncols() != model.x_inducing.ncols() {
        return Err(DkmError::DimensionMismatch(format!(
            "feature dims differ: data {} vs inducing {}",
            data.x_t.ncols(),
            model.x_inducing.ncols()
        )));
    }
    if data.targets.len() != data.num_units() {
        return Err(DkmError::DimensionMismatch(format!(
            "{} targets for {} units",
            data.targets.len(),
            data.num_units()
        )));
    }
    let carry_full_tt = !data.scheme.is_inter() || model.gtt_mode == GttMode::Exact;

    let mut tape = Tape::new();

    // trainable leaves in layout order
    let layout = model.param_layout();
    let param_vars: Vec<Var> = layout
        .iter()
        .map(|slot| tape.param(model.get_param(slot)))
        .collect();
    let slot_var = |slot: &ParamSlot| -> Var {
        param_vars[layout
            .iter()
            .position(|s| s == slot)
            .expect("slot present in layout")]
    };

    // input Gram blocks (constants)
    let nu0 = model.x_inducing.ncols().max(1) as f64;
    let xi = &model.x_inducing;
    let xt = &data.x_t;
    let g_ii0 = {
        let g = xi.dot(&xi.t()) / nu0;
        tape.constant(0.5 * (&g + &g.t()))
    };
    let g_ti0 = tape.constant(xt.dot(&xi.t()) / nu0);
    let (g_tt0, g_tt0_diag) = if carry_full_tt {
        let g = xt.dot(&xt.t()) / nu0;
        (Some(tape.constant(0.5 * (&g + &g.t()))), None)
    } else {
        let mut d = Mat::zeros((p_t, 1));
        for u in 0..p_t {
            let mut acc = 0.0;
            for j in 0..xt.ncols() {
                acc += xt[[u, j]] * xt[[u, j]];
            }
            d[[u, 0]] = acc / nu0;
        }
        (None, Some(tape.constant(d)))
    };

    let mut state = BlockState {
        g_ii: g_ii0,
        g_ti: g_ti0,
        g_tt: g_tt0,
        g_tt_diag: g_tt0_diag,
    };
    let mut layers: Vec<LayerHandles> = Vec::with_capacity(model.depth);
    let identity_l = tape.constant(Mat::eye(p_i));

    for l in 0..model.depth {
        // base kernel, blockwise
        let (phi_ii, phi_ti, phi_tt) = match model.base_kernel {
            BaseKernel::Linear => (state.g_ii, state.g_ti, state.g_tt),
            BaseKernel::Arccos => {
                let d_i = tape.diag_of(state.g_ii);
                let d_t = match (state.g_tt, state.g_tt_diag) {
                    (Some(full), _) => tape.diag_of(full),
                    (None, Some(d)) => d,
                    (None, None) => unreachable!("tt diagonal is always tracked"),
                };
                let p_ii = tape.arccos_full(state.g_ii);
                let p_ti = tape.arccos_cross(state.g_ti, d_t, d_i);
                let p_tt = state.g_tt.map(|full| tape.arccos_full(full));
                (p_ii, p_ti, p_tt)
            }
        };

        // adjacency sandwich
        let sch = &data.scheme;
        let (k_ii, k_ti, k_tt) = if sch.is_inter() {
            let k_ii = phi_ii;
            let k_ti = tape.spmm_left(sch.a_tt.clone(), sch.a_tt.clone(), phi_ti);
            let k_tt = match (model.gtt_mode, phi_tt) {
                (GttMode::Exact, Some(ptt)) => {
                    let t = tape.spmm_left(sch.a_tt.clone(), sch.a_tt.clone(), ptt);
                    Some(tape.spmm_right_t(t, sch.a_tt.clone()))
                }
                _ => None,
            };
            (k_ii, k_ti, k_tt)
        } else {
            let ptt = phi_tt.expect("intra-domain carries a full tt block");
            let phi_it = tape.transpose(phi_ti);
            // rows of A * Phi
            let t1 = tape.spmm_left(sch.a_ii.clone(), sch.a_ii_t.clone(), phi_ii);
            let t2 = tape.spmm_left(sch.a_it.clone(), sch.a_ti.clone(), phi_ti);
            let top_i = tape.add(t1, t2);
            let t3 = tape.spmm_left(sch.a_ii.clone(), sch.a_ii_t.clone(), phi_it);
            let t4 = tape.spmm_left(sch.a_it.clone(), sch.a_ti.clone(), ptt);
            let top_t = tape.add(t3, t4);
            let b1 = tape.spmm_left(sch.a_ti.clone(), sch.a_it.clone(), phi_ii);
            let b2 = tape.spmm_left(sch.a_tt.clone(), sch.a_tt.clone(), phi_ti);
            let bot_i = tape.add(b1, b2);
            let b3 = tape.spmm_left(sch.a_ti.clone(), sch.a_it.clone(), phi_it);
            let b4 = tape.spmm_left(sch.a_tt.clone(), sch.a_tt.clone(), ptt);
            let bot_t = tape.add(b3, b4);
            // columns of (A Phi) A^T
            let k1 = tape.spmm_right_t(top_i, sch.a_ii.clone());
            let k2 = tape.spmm_right_t(top_t, sch.a_it.clone());
            let k_ii = tape.add(k1, k2);
            let k3 = tape.spmm_right_t(bot_i, sch.a_ii.clone());
            let k4 = tape.spmm_right_t(bot_t, sch.a_it.clone());
            let k_ti = tape.add(k3, k4);
            let k5 = tape.spmm_right_t(bot_i, sch.a_ti.clone());
            let k6 = tape.spmm_right_t(bot_t, sch.a_tt.clone());
            let k_tt = tape.add(k5, k6);
            (k_ii, k_ti, Some(k_tt))
        };

        // Cholesky parameterization around the layer prior K_ii
        let h = tape.cholesky(k_ii, TAPE_JITTER)?;
        let (l_var, kl) = if model.nu[l].is_infinite() {
            (identity_l, None)
        } else {
            let raw = slot_var(&ParamSlot::Layer(l));
            let masked = tape.tril_mask(raw);
            let kl = if model.nu[l].value() > 0.0 {
                let d = tape.dot(masked, masked);
                let sld = tape.sum_log_diag(masked)?;
                let half = tape.scale(d, 0.5);
                let m = tape.sub(half, sld);
                Some(tape.add_const(m, -0.5 * p_i as f64))
            } else {
                None
            };
            (masked, kl)
        };
        let f_i = tape.matmul(h, l_var);
        let f_i_t = tape.transpose(f_i);
        let mut g_ii = tape.matmul(f_i, f_i_t);
        let t_ti = tape.solve_lower_trans_right(h, k_ti);
        let f_t = tape.matmul(t_ti, l_var);
        let mut g_ti = tape.matmul(f_t, f_i_t);
        let f_t_t = tape.transpose(f_t);
        let (mut g_tt, mut g_tt_diag) = match model.gtt_mode {
            GttMode::Exact => {
                let k_tt = k_tt.expect("exact mode carries a full tt block");
                let k_it = tape.transpose(k_ti);
                let v = tape.solve_lower_left(h, k_it);
                let v_t = tape.transpose(v);
                let corr = tape.matmul(v_t, v);
                let nystrom = tape.matmul(f_t, f_t_t);
                let base = tape.sub(k_tt, corr);
                (Some(tape.add(base, nystrom)), None)
            }
            GttMode::Nystrom => {
                if carry_full_tt {
                    (Some(tape.matmul(f_t, f_t_t)), None)
                } else {
                    (None, Some(tape.row_squared_norms(f_t)))
                }
            }
        };

        // optional centering layer on the Gram representation
        let cent = &model.centering[l];
        if cent.enabled {
            let c_ii = tape.double_center(g_ii);
            let c_ti = tape.double_center(g_ti);
            let c_tt = g_tt.map(|v| tape.double_center(v));
            let c_tt_diag = g_tt_diag.map(|_| {
                let ftc = tape.center_rows(f_t);
                tape.row_squared_norms(ftc)
            });
            if cent.learn_affine {
                let gamma = slot_var(&ParamSlot::Gamma(l));
                let beta = slot_var(&ParamSlot::Beta(l));
                let g2 = tape.matmul(gamma, gamma);
                let b2 = tape.matmul(beta, beta);
                let scale_add = |tape: &mut Tape, m: Var, rows: usize, cols: usize| {
                    let a = tape.scalar_mul_mat(g2, m);
                    let ones = tape.constant(Mat::from_elem((rows, cols), 1.0));
                    let b = tape.scalar_mul_mat(b2, ones);
                    tape.add(a, b)
                };
                g_ii = scale_add(&mut tape, c_ii, p_i, p_i);
                g_ti = scale_add(&mut tape, c_ti, p_t, p_i);
                g_tt = c_tt.map(|v| scale_add(&mut tape, v, p_t, p_t));
                g_tt_diag = c_tt_diag.map(|v| scale_add(&mut tape, v, p_t, 1));
            } else {
                g_ii = c_ii;
                g_ti = c_ti;
                g_tt = c_tt;
                g_tt_diag = c_tt_diag;
            }
        }

        layers.push(LayerHandles {
            k_ii,
            k_ti,
            k_tt,
            g_ii,
            g_ti,
            g_tt,
            g_tt_diag,
            kl,
        });
        state = BlockState {
            g_ii,
            g_ti,
            g_tt,
            g_tt_diag,
        };
    }

    // top-layer kernel: base kernel only, no adjacency sandwich
    let (top_k_ii, top_k_ti) = match model.base_kernel {
        BaseKernel::Linear => (state.g_ii, state.g_ti),
        BaseKernel::Arccos => {
            let d_i = tape.diag_of(state.g_ii);
            let d_t = match (state.g_tt, state.g_tt_diag) {
                (Some(full), _) => tape.diag_of(full),
                (None, Some(d)) => d,
                (None, None) => unreachable!(),
            };
            let ii = tape.arccos_full(state.g_ii);
            let ti = tape.arccos_cross(state.g_ti, d_t, d_i);
            (ii, ti)
        }
    };

    // variational head: logits = K_ti H^-T W with W = mu + C z
    let hs = tape.cholesky(top_k_ii, TAPE_JITTER)?;
    let t_top = tape.solve_lower_trans_right(hs, top_k_ti);
    let mu = slot_var(&ParamSlot::Mu);
    let sigma_raw = slot_var(&ParamSlot::SigmaChol);
    let c_sig = tape.tril_mask(sigma_raw);

    let rows = Rc::new(data.train_idx.clone());
    let labels = Rc::new(
        data.train_idx
            .iter()
            .map(|&i| data.targets[i])
            .collect::<Vec<_>>(),
    );
    let unit_logits = |tape: &mut Tape, node_logits: Var| -> Var {
        match &data.pool {
            Some(pool) => {
                let pt = Rc::new(pool.transpose());
                tape.spmm_left(pool.clone(), pt, node_logits)
            }
            None => node_logits,
        }
    };

    let mut sample_logits = Vec::with_capacity(noise.samples.len());
    let mut ce_sum: Option<Var> = None;
    for z in &noise.samples {
        let z_var = tape.constant(z.clone());
        let cz = tape.matmul(c_sig, z_var);
        let w = tape.add(mu, cz);
        let node_logits = tape.matmul(t_top, w);
        let logits = unit_logits(&mut tape, node_logits);
        sample_logits.push(logits);
        let ce = tape.softmax_cross_entropy_sum(logits, rows.clone(), labels.clone());
        ce_sum = Some(match ce_sum {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    let n_samples = noise.samples.len().max(1);
    let loglik = match ce_sum {
        Some(acc) => tape.scale(acc, 1.0 / n_samples as f64),
        None => tape.constant_scalar(0.0),
    };
    let node_logits_mean = tape.matmul(t_top, mu);
    let logits_mean = unit_logits(&mut tape, node_logits_mean);

    // weight KL: |mu|^2/2 + C(|Csig|^2 - 2 sum log diag - P_i)/2
    let d_mu = tape.dot(mu, mu);
    let d_c = tape.dot(c_sig, c_sig);
    let sld_c = tape.sum_log_diag(c_sig).map_err(|e| match e {
        crate::tape::TapeError::NonPositiveDiagonal { row, value } => {
            DkmError::DegenerateSigma(format!("sigma factor diagonal {value:.3e} at row {row}"))
        }
        other => DkmError::Tape(other),
    })?;
    let c_f = classes as f64;
    let t1 = tape.scale(d_mu, 0.5);
    let t2 = tape.scale(d_c, 0.5 * c_f);
    let t3 = tape.scale(sld_c, -c_f);
    let t4 = tape.add(t2, t3);
    let t5 = tape.add_const(t4, -0.5 * c_f * p_i as f64);
    let weight_kl = tape.add(t1, t5);

    // objective = loglik - weight KL - sum_l nu_l * layer KL
    let mut objective = tape.sub(loglik, weight_kl);
    for (l, handles) in layers.iter().enumerate() {
        if let Some(kl) = handles.kl {
            let scaled = tape.scale(kl, model.nu[l].value());
            objective = tape.sub(objective, scaled);
        }
    }

    Ok(SparseParts {
        tape,
        param_vars,
        objective,
        loglik,
        weight_kl,
        layers,
        top_k_ii,
        top_k_ti,
        sample_logits,
        logits_mean,
    })
}

/// Sparse ELBO value at the model's current parameters.
pub fn sparse_objective(model: &DkmModel, data: &PreparedGraph, noise: &McNoise) -> Result<f64> {
    let parts = build_sparse_objective(model, data, noise)?;
    Ok(parts.tape.scalar_value(parts.objective))
}

/// Runs the sparse forward pass and extracts all per-layer kernel and Gram
/// blocks plus the top-layer kernel as plain matrices.
pub fn sparse_forward(model: &DkmModel, data: &PreparedGraph) -> Result<KernelStack> {
    let noise = McNoise::zeros(model.num_inducing(), model.num_classes());
    let parts = build_sparse_objective(model, data, &noise)?;
    let tape = &parts.tape;
    let block = |k_ii: Var, k_ti: Var, full: Option<Var>, diag: Option<Var>| BlockGram {
        g_ii: tape.value(k_ii).clone(),
        g_ti: tape.value(k_ti).clone(),
        g_tt: match (full, diag) {
            (Some(f), _) => GttBlock::Full(tape.value(f).clone()),
            (None, Some(d)) => GttBlock::Diag(tape.value(d).column(0).iter().cloned().collect()),
            (None, None) => GttBlock::Absent,
        },
    };
    let layers = parts
        .layers
        .iter()
        .map(|h| LayerBlocks {
            kernel: block(h.k_ii, h.k_ti, h.k_tt, None),
            gram: block(h.g_ii, h.g_ti, h.g_tt, h.g_tt_diag),
        })
        .collect();
    Ok(KernelStack {
        layers,
        top_k_ii: tape.value(parts.top_k_ii).clone(),
        top_k_ti: tape.value(parts.top_k_ti).clone(),
    })
}

/// Monte-Carlo expected log-likelihood of the categorical head plus the
/// closed-form weight KL, computed directly from a top-layer kernel block.
/// Serves as the independent oracle for the tape path.
pub fn head_log_likelihood(
    kernel_top: &BlockGram,
    head: &VariationalHead,
    targets: &[usize],
    train_idx: &[usize],
    pool: Option<&CsrMatrix>,
    noise: &McNoise,
) -> Result<(f64, f64)> {
    let k_ii = SpdMatrix::from_symmetrized(kernel_top.g_ii.clone())?;
    let hs = cholesky(&k_ii, &JitterPolicy::default())?.factor;
    let t = solve_lower_trans_right(&kernel_top.g_ti, hs.as_mat());
    let mut tril_c = head.sigma_chol.clone();
    let p_i = tril_c.nrows();
    for i in 0..p_i {
        for j in (i + 1)..p_i {
            tril_c[[i, j]] = 0.0;
        }
    }
    let mut acc = 0.0;
    for z in &noise.samples {
        let w = &head.mu + &tril_c.dot(z);
        let node_logits = t.dot(&w);
        let logits = match pool {
            Some(p) => p.matmul_dense(&node_logits),
            None => node_logits,
        };
        for &i in train_idx {
            let row = logits.row(i);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            acc += logits[[i, targets[i]]] - lse;
        }
    }
    let expected = acc / noise.samples.len().max(1) as f64;
    Ok((expected, head.weight_kl()?))
}

/// Unit-level class probabilities, averaged over `mc_samples` posterior
/// weight draws (deterministic given the seed).
pub fn predict_probs(
    model: &DkmModel,
    data: &PreparedGraph,
    mc_samples: usize,
    seed: u64,
) -> Result<Mat> {
    let noise = if mc_samples == 0 {
        McNoise::zeros(model.num_inducing(), model.num_classes())
    } else {
        McNoise::sample(
            model.num_inducing(),
            model.num_classes(),
            mc_samples,
            seed,
            0xe7a1,
        )
    };
    let parts = build_sparse_objective(model, data, &noise)?;
    let units = match &data.pool {
        Some(p) => p.nrows(),
        None => data.num_nodes(),
    };
    let mut probs = Mat::zeros((units, model.num_classes()));
    for &lv in &parts.sample_logits {
        let logits = parts.tape.value(lv);
        for u in 0..units {
            let row = logits.row(u);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
            for c in 0..model.num_classes() {
                probs[[u, c]] +=
                    ((logits[[u, c]] - maxv).exp() / z) / parts.sample_logits.len() as f64;
            }
        }
    }
    Ok(probs)
}

/// Accuracy of argmax predictions on the given unit indices.
pub fn accuracy(probs: &Mat, targets: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut correct = 0usize;
    for &i in idx {
        let row = probs.row(i);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == targets[i] {
            correct += 1;
        }
    }
    correct as f64 / idx.len() as f64
}
