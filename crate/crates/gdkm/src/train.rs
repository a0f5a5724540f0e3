//! Training: the Adam optimizer with the two-stage learning-rate schedule,
//! gradient extraction for the sparse objective, the fit loop, the nu-sweep
//! harness, and the linear analytic demo.

use crate::dataio::{self, FeatureScaling, GraphDataset, Split, Task};
use crate::dkm::{
    self, build_full_rank_tape, build_sparse_objective, kl_gaussian, linear_closed_form,
    sample_inducing_rows, DkmError, DkmModel, FullRankLikelihood, GttMode, InducingScheme, McNoise,
    Nu, PreparedGraph, SchemeKind,
};
use crate::graphops::{interpolate_lambda, normalize_kipf, rng_for, RngPurpose};
use crate::kernels::{cka, normalize_kernel, BaseKernel, CenteringParams};
use crate::numerics::{Mat, SpdMatrix};
use rayon::prelude::*;
use std::rc::Rc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dkm(#[from] DkmError),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Kernel(#[from] crate::kernels::KernelError),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Learning-rate schedule over epochs `0..=total`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup `base -> peak` on the first quarter of training, then
    /// cosine decay `peak -> floor`.
    TwoStage {
        base: f64,
        peak: f64,
        floor: f64,
        total_epochs: usize,
        warm_fraction: f64,
    },
    /// Polynomial decay `init / (1 + e)^power`, used by the linear demo.
    Polynomial {
        init: f64,
        power: f64,
    },
    Constant {
        lr: f64,
    },
}

impl LrSchedule {
    pub fn two_stage(total_epochs: usize) -> Self {
        LrSchedule::TwoStage {
            base: 1e-3,
            peak: 1e-2,
            floor: 1e-5,
            total_epochs,
            warm_fraction: 0.25,
        }
    }

    pub fn polynomial() -> Self {
        LrSchedule::Polynomial {
            init: 0.1,
            power: 0.7,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::TwoStage {
                base,
                peak,
                floor,
                total_epochs,
                warm_fraction,
            } => {
                let t = total_epochs.max(1) as f64;
                let warm = warm_fraction * t;
                let e = epoch as f64;
                if e <= warm {
                    if warm == 0.0 {
                        peak
                    } else {
                        base + (peak - base) * (e / warm)
                    }
                } else {
                    let progress = (e - warm) / (t - warm);
                    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
            LrSchedule::Polynomial { init, power } => init * (1.0 + epoch as f64).powf(-power),
            LrSchedule::Constant { lr } => lr,
        }
    }
}

/// Adam state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Mat]) -> Self {
        Self {
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One ascent step (gradients point uphill; the objective is maximized).
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv += lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Clips gradients to a global norm; returns true if clipping was active.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> bool {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
        true
    } else {
        false
    }
}

/// Objective value, decomposed terms and gradients of the sparse objective
/// with respect to every trainable parameter (in layout order).
pub struct SparseGrad {
    pub objective: f64,
    pub loglik: f64,
    pub weight_kl: f64,
    /// Honest per-layer `KL(N(0,G_ii) || N(0,K_ii))`, evaluated directly.
    pub layer_kls: Vec<f64>,
    pub grads: Vec<Mat>,
}

/// Reverse-mode gradients of the sparse objective.
pub fn grad_sparse_objective(
    model: &DkmModel,
    data: &PreparedGraph,
    noise: &McNoise,
) -> Result<SparseGrad> {
    let mut parts = build_sparse_objective(model, data, noise)?;
    let objective = parts.tape.scalar_value(parts.objective);
    let loglik = parts.tape.scalar_value(parts.loglik);
    let weight_kl = parts.tape.scalar_value(parts.weight_kl);
    let layer_kls = layer_kls_from_parts(&parts)?;
    let grads_all = parts
        .tape
        .backward(parts.objective)
        .map_err(DkmError::Tape)?;
    let layout = model.param_layout();
    let grads: Vec<Mat> = parts
        .param_vars
        .iter()
        .zip(layout.iter())
        .map(|(&v, slot)| grads_all.get_or_zeros(v, model.get_param(slot).dim()))
        .collect();
    Ok(SparseGrad {
        objective,
        loglik,
        weight_kl,
        layer_kls,
        grads,
    })
}

fn layer_kls_from_parts(parts: &dkm::SparseParts) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(parts.layers.len());
    for h in &parts.layers {
        let g = SpdMatrix::from_symmetrized(parts.tape.value(h.g_ii).clone())
            .map_err(DkmError::Numerics)?;
        let k = SpdMatrix::from_symmetrized(parts.tape.value(h.k_ii).clone())
            .map_err(DkmError::Numerics)?;
        out.push(kl_gaussian(&g, &k)?);
    }
    Ok(out)
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub loglik: f64,
    pub kl_layers: Vec<f64>,
    pub lr: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub clip_norm: f64,
    /// Evaluate accuracies every this many epochs (always at 0 and the end).
    pub eval_every: usize,
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            schedule: LrSchedule::two_stage(epochs),
            seed,
            clip_norm: 100.0,
            eval_every: 1,
        }
    }
}

pub struct FitResult {
    pub model: DkmModel,
    pub metrics: Vec<EpochRecord>,
    /// Epoch at which the objective became non-finite, if any; the model
    /// retains the last good parameters in that case.
    pub diverged_at: Option<usize>,
}

const EVAL_SEED_TAG: u64 = 0x5eed_0e7a;

/// Train/val/test accuracies from MC-averaged predictive probabilities
/// (`None` for empty splits). Deterministic given the seed.
pub fn evaluate_accuracy(
    model: &DkmModel,
    data: &PreparedGraph,
    seed: u64,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let probs = dkm::predict_probs(model, data, model.head.mc_eval, seed ^ EVAL_SEED_TAG)?;
    let acc = |idx: &[usize]| -> Option<f64> {
        if idx.is_empty() {
            None
        } else {
            Some(dkm::accuracy(&probs, &data.targets, idx))
        }
    };
    Ok((
        acc(&data.train_idx),
        acc(&data.val_idx),
        acc(&data.test_idx),
    ))
}

/// Full-batch Adam ascent on the sparse objective. One epoch is one
/// gradient step. Deterministic given the seed (single-threaded).
///
/// The metrics log holds `epochs + 1` records: an initial evaluation at
/// epoch 0, then one record per step. `on_epoch` (when given) sees each
/// record as it is produced.
pub fn fit(
    model: DkmModel,
    data: &PreparedGraph,
    opts: &TrainOptions,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<FitResult> {
    let mut model = model;
    let started = Instant::now();
    let mut metrics = Vec::with_capacity(opts.epochs + 1);
    let mut diverged_at = None;

    let p_i = model.num_inducing();
    let classes = model.num_classes();

    // epoch-0 evaluation before any step
    {
        let noise = McNoise::sample(p_i, classes, model.head.mc_train, opts.seed, 0);
        let parts = build_sparse_objective(&model, data, &noise)?;
        let (train_acc, val_acc, _) = evaluate_accuracy(&model, data, opts.seed)?;
        let rec = EpochRecord {
            epoch: 0,
            objective: parts.tape.scalar_value(parts.objective),
            loglik: parts.tape.scalar_value(parts.loglik),
            kl_layers: layer_kls_from_parts(&parts)?,
            lr: opts.schedule.at(0),
            train_acc,
            val_acc,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&rec);
        }
        metrics.push(rec);
    }

    let mut params = model.snapshot_params();
    let mut adam = AdamState::new(&params);
    let mut last_good = params.clone();

    for epoch in 0..opts.epochs {
        let epoch_start = Instant::now();
        let noise = McNoise::sample(
            p_i,
            classes,
            model.head.mc_train,
            opts.seed,
            epoch as u64 + 1,
        );
        // An infeasible step (factorization failure, non-positive diagonal,
        // non-finite objective) is shrunk geometrically back towards the
        // last feasible parameters before giving up.
        let mut step = None;
        for backtrack in 0..=8 {
            match grad_sparse_objective(&model, data, &noise) {
                Ok(s) if s.objective.is_finite() => {
                    step = Some(s);
                    break;
                }
                Ok(_)
                | Err(TrainError::Dkm(DkmError::Tape(_)))
                | Err(TrainError::Dkm(DkmError::DegenerateSigma(_))) => {
                    if backtrack == 8 {
                        break;
                    }
                    log::debug!("epoch {epoch}: infeasible step, backtracking ({backtrack})");
                    for (p, good) in params.iter_mut().zip(last_good.iter()) {
                        *p = 0.5 * (&*p + good);
                    }
                    model.restore_params(&params);
                }
                Err(e) => return Err(e),
            }
        }
        let Some(step) = step else {
            log::warn!("objective diverged at epoch {epoch}; keeping last good parameters");
            model.restore_params(&last_good);
            diverged_at = Some(epoch);
            break;
        };
        last_good = params.clone();
        let mut grads = step.grads;
        let clipped = clip_global_norm(&mut grads, opts.clip_norm);
        if clipped {
            log::debug!("epoch {epoch}: gradient clipped to norm {}", opts.clip_norm);
        }
        let lr = opts.schedule.at(epoch);
        adam.step(&mut params, &grads, lr);
        let mut candidate = model.clone();
        candidate.restore_params(&params);
        let do_eval =
            opts.eval_every > 0 && (epoch % opts.eval_every == 0 || epoch + 1 == opts.epochs);
        let (train_acc, val_acc) = if do_eval {
            match evaluate_accuracy(&candidate, data, opts.seed) {
                Ok((t, v, _)) => (t, v),
                Err(TrainError::Dkm(DkmError::Tape(_)))
                | Err(TrainError::Dkm(DkmError::DegenerateSigma(_))) => {
                    // the step itself was infeasible; the next epoch's
                    // backtracking pass will shrink it
                    (None, None)
                }
                Err(e) => return Err(e),
            }
        } else {
            (None, None)
        };
        model = candidate;
        let rec = EpochRecord {
            epoch: epoch + 1,
            objective: step.objective,
            loglik: step.loglik,
            kl_layers: step.layer_kls,
            lr,
            train_acc,
            val_acc,
            wall_ms: epoch_start.elapsed().as_millis() as u64,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&rec);
        }
        metrics.push(rec);
    }

    Ok(FitResult {
        model,
        metrics,
        diverged_at,
    })
}

/// Row-stochastic mean-pool operator over a node -> graph assignment.
pub fn pool_from_graph_ids(ids: &[usize]) -> crate::graphops::CsrMatrix {
    let num_graphs = ids.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_graphs];
    for &g in ids.iter() {
        counts[g] += 1;
    }
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(ids.len());
    for (node, &g) in ids.iter().enumerate() {
        triplets.push((g, node, 1.0 / counts[g] as f64));
    }
    crate::graphops::CsrMatrix::from_triplets(num_graphs, ids.len(), &mut triplets)
}

/// Model/architecture configuration shared by the CLI and the sweep harness.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub nu: Nu,
    pub base_kernel: BaseKernel,
    pub gtt_mode: GttMode,
    pub scheme: SchemeKind,
    pub num_inducing: usize,
    /// Identity interpolation; 0 keeps the plain Kipf normalization.
    pub lambda: f64,
    pub feature_scaling: FeatureScaling,
    pub centering: CenteringParams,
    pub mc_train: usize,
    pub mc_eval: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            nu: Nu::finite(1.0),
            base_kernel: BaseKernel::Arccos,
            gtt_mode: GttMode::Nystrom,
            scheme: SchemeKind::Inter,
            num_inducing: 100,
            lambda: 0.0,
            feature_scaling: FeatureScaling::SumSquares,
            centering: CenteringParams::default(),
            mc_train: 1,
            mc_eval: 16,
        }
    }
}

/// Builds the model and the prepared data view for one dataset split.
pub fn prepare(
    ds: &GraphDataset,
    split: &Split,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(DkmModel, PreparedGraph)> {
    if ds.task == Task::Graph && cfg.scheme == SchemeKind::Intra {
        return Err(TrainError::Config(
            "the intra-domain scheme does not apply to multi-graph datasets".into(),
        ));
    }
    let x = dataio::scale_features(&ds.features, cfg.feature_scaling);
    let mut a = normalize_kipf(&ds.edges);
    if cfg.lambda > 0.0 {
        a = interpolate_lambda(&a, cfg.lambda);
    }
    let p_i = cfg.num_inducing.min(ds.num_nodes());
    let (indices, x_inducing) = sample_inducing_rows(&x, p_i, seed);
    let scheme = match cfg.scheme {
        SchemeKind::Inter => InducingScheme::inter(p_i, &a),
        SchemeKind::Intra => InducingScheme::intra(indices, &a),
    };
    let pool = match (&ds.task, &ds.graph_ids) {
        (Task::Graph, Some(ids)) => Some(Rc::new(pool_from_graph_ids(ids))),
        _ => None,
    };
    let model = DkmModel::init(
        cfg.depth,
        vec![cfg.nu; cfg.depth],
        cfg.base_kernel,
        cfg.gtt_mode,
        x_inducing,
        ds.num_classes,
        vec![cfg.centering; cfg.depth],
    );
    let mut model = model;
    model.head.mc_train = cfg.mc_train;
    model.head.mc_eval = cfg.mc_eval;
    let data = PreparedGraph {
        x_t: x,
        scheme,
        targets: ds.labels.clone(),
        train_idx: split.train.clone(),
        val_idx: split.val.clone(),
        test_idx: split.test.clone(),
        num_classes: ds.num_classes,
        pool,
    };
    Ok((model, data))
}

/// One sweep cell result; failed cells carry the error text instead of
/// accuracies.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub dataset: String,
    pub nu: Nu,
    pub scheme: SchemeKind,
    pub seed: u64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepAggregate {
    pub nu: Nu,
    pub scheme: SchemeKind,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub mean_test_acc: f64,
    pub cells: usize,
}

#[derive(Debug, serde::Serialize)]
pub struct SweepResults {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
    /// Best (nu, scheme) by mean validation accuracy.
    pub best: Option<SweepAggregate>,
}

/// Trains one cell per `(nu, scheme, seed)` and aggregates validation
/// accuracy. Cells run in parallel; each cell is single-owner and
/// deterministic given its seed.
pub fn sweep_nu(
    ds: &GraphDataset,
    base_cfg: &ModelConfig,
    nu_grid: &[Nu],
    schemes: &[SchemeKind],
    seeds: &[u64],
    epochs: usize,
) -> SweepResults {
    let mut cells: Vec<(Nu, SchemeKind, u64)> = Vec::new();
    for &nu in nu_grid {
        for &scheme in schemes {
            for &seed in seeds {
                cells.push((nu, scheme, seed));
            }
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(nu, scheme, seed)| {
            let mut cfg = base_cfg.clone();
            cfg.nu = nu;
            cfg.scheme = scheme;
            let run = || -> Result<(f64, f64)> {
                let split = ds.splits.primary().clone();
                let (model, data) = prepare(ds, &split, &cfg, seed)?;
                let opts = TrainOptions {
                    eval_every: epochs.max(1),
                    ..TrainOptions::new(epochs, seed)
                };
                let fitres = fit(model, &data, &opts, None)?;
                let (_, val, test) = evaluate_accuracy(&fitres.model, &data, seed)?;
                Ok((val.unwrap_or(f64::NAN), test.unwrap_or(f64::NAN)))
            };
            match run() {
                Ok((val, test)) => SweepRow {
                    dataset: ds.name.clone(),
                    nu,
                    scheme,
                    seed,
                    val_acc: Some(val),
                    test_acc: Some(test),
                    error: None,
                },
                Err(e) => SweepRow {
                    dataset: ds.name.clone(),
                    nu,
                    scheme,
                    seed,
                    val_acc: None,
                    test_acc: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut aggregates = Vec::new();
    for &nu in nu_grid {
        for &scheme in schemes {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.nu == nu && r.scheme == scheme)
                .filter_map(|r| r.val_acc)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let tests: Vec<f64> = rows
                .iter()
                .filter(|r| r.nu == nu && r.scheme == scheme)
                .filter_map(|r| r.test_acc)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            aggregates.push(SweepAggregate {
                nu,
                scheme,
                mean_val_acc: mean,
                std_val_acc: var.sqrt(),
                mean_test_acc: tests.iter().sum::<f64>() / tests.len().max(1) as f64,
                cells: vals.len(),
            });
        }
    }
    let best = aggregates
        .iter()
        .cloned()
        .max_by(|a, b| a.mean_val_acc.partial_cmp(&b.mean_val_acc).unwrap());
    SweepResults {
        rows,
        aggregates,
        best,
    }
}

/// Configuration of the linear analytic demo (closed form vs gradient
/// descent on a seeded Erdős–Rényi dataset).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LinearDemoConfig {
    pub n_nodes: usize,
    pub edge_prob: f64,
    pub lambda: f64,
    pub depth: usize,
    pub seed: u64,
    /// Added to `Y Y^T` to make the output kernel positive definite.
    pub label_jitter: f64,
    /// Gradient-descent confirmation epochs (0 skips the GD run).
    pub gd_epochs: usize,
    /// Initialize gradient descent from Wishart samples instead of the
    /// input kernel.
    pub wishart_init: bool,
}

impl Default for LinearDemoConfig {
    fn default() -> Self {
        Self {
            n_nodes: 50,
            edge_prob: 0.1,
            lambda: 0.5,
            depth: 2,
            seed: 0,
            label_jitter: 1.0,
            gd_epochs: 10_000,
            wishart_init: true,
        }
    }
}

pub struct GdConfirm {
    pub grams: Vec<Mat>,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub analytic_objective: f64,
    /// Max-abs difference between normalized closed-form and GD kernels.
    pub max_abs_diff_normalized: f64,
}

pub struct LinearDemoResult {
    pub g0: SpdMatrix,
    pub label_kernel: SpdMatrix,
    pub labels: Vec<usize>,
    pub closed_form: Vec<SpdMatrix>,
    pub nngp: Vec<SpdMatrix>,
    pub cka_dkm: f64,
    pub cka_nngp: f64,
    pub gd: Option<GdConfirm>,
}

/// Wishart sample `Z Z^T / dof` with standard-normal entries.
pub fn wishart_sample(n: usize, dof: usize, seed: u64) -> SpdMatrix {
    let mut rng = rng_for(seed, RngPurpose::WishartInit);
    let mut z = Mat::zeros((n, dof));
    for v in z.iter_mut() {
        *v = dataio::standard_normal(&mut rng);
    }
    SpdMatrix::from_symmetrized(z.dot(&z.t()) / dof as f64).expect("Wishart sample is symmetric")
}

/// Runs the linear-kernel analytic experiment: seeded ER graph, Wishart
/// input kernel, balanced two-class labels; closed-form Gram matrices per
/// layer, the linear NNGP kernels, top-layer CKA against the label kernel,
/// and optionally a gradient-descent confirmation.
pub fn run_linear_demo(cfg: &LinearDemoConfig) -> Result<LinearDemoResult> {
    use rand::seq::SliceRandom;
    let n = cfg.n_nodes;
    let edges = crate::graphops::erdos_renyi(n, cfg.edge_prob, cfg.seed);
    let a = interpolate_lambda(&normalize_kipf(&edges), cfg.lambda);
    let g0 = wishart_sample(n, n, cfg.seed);

    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut rng = rng_for(cfg.seed, RngPurpose::Labels);
    labels.shuffle(&mut rng);
    let mut y = Mat::zeros((n, 1));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, 0]] = if l == 0 { 1.0 } else { -1.0 };
    }
    let label_kernel = SpdMatrix::from_symmetrized(y.dot(&y.t()))?;
    let g_out = SpdMatrix::new(label_kernel.as_mat() + &(cfg.label_jitter * Mat::eye(n)))?;

    let mut closed_form = Vec::with_capacity(cfg.depth);
    for ell in 1..=cfg.depth {
        closed_form.push(linear_closed_form(&g0, &g_out, &a, cfg.depth, ell)?);
    }
    let nngp_cfg = crate::nngp::NngpConfig {
        depth: cfg.depth,
        base_kernel: BaseKernel::Linear,
        adjacency: a.clone(),
    };
    let nngp = crate::nngp::nngp_forward(&g0, &nngp_cfg)?;

    let cka_dkm = cka(closed_form.last().unwrap(), &label_kernel)?;
    let cka_nngp = cka(nngp.last().unwrap(), &label_kernel)?;

    let gd = if cfg.gd_epochs > 0 {
        Some(run_linear_gd(cfg, &g0, &g_out, &a, &closed_form)?)
    } else {
        None
    };

    Ok(LinearDemoResult {
        g0,
        label_kernel,
        labels,
        closed_form,
        nngp,
        cka_dkm,
        cka_nngp,
        gd,
    })
}

fn run_linear_gd(
    cfg: &LinearDemoConfig,
    g0: &SpdMatrix,
    g_out: &SpdMatrix,
    a: &crate::graphops::NormalizedAdjacency,
    closed_form: &[SpdMatrix],
) -> Result<GdConfirm> {
    let n = cfg.n_nodes;
    let nu = vec![1.0; cfg.depth];
    let likelihood = FullRankLikelihood::LabelKernelKl {
        g_out: g_out.clone(),
    };
    // factors M^l with G^l = M M^T
    let mut params: Vec<Mat> = (0..cfg.depth)
        .map(|l| {
            let init = if cfg.wishart_init {
                wishart_sample(n, n, cfg.seed.wrapping_add(l as u64 + 1))
            } else {
                g0.clone()
            };
            crate::numerics::cholesky(&init, &crate::numerics::JitterPolicy::default())
                .expect("init kernel factorizes")
                .factor
                .into_mat()
        })
        .collect();
    let schedule = LrSchedule::polynomial();
    let mut adam = AdamState::new(&params);
    let mut trace = Vec::with_capacity(cfg.gd_epochs);
    let jitter = &[0.0, 1e-12, 1e-10];
    for epoch in 0..cfg.gd_epochs {
        let built = build_full_rank_tape(
            &params,
            g0,
            a,
            &nu,
            BaseKernel::Linear,
            &likelihood,
            true,
            jitter,
        )?;
        let mut tape = built.tape;
        let obj = tape.scalar_value(built.objective);
        trace.push(obj);
        let grads_all = tape.backward(built.objective).map_err(DkmError::Tape)?;
        let mut grads: Vec<Mat> = built
            .param_vars
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| grads_all.get_or_zeros(v, p.dim()))
            .collect();
        clip_global_norm(&mut grads, 100.0);
        adam.step(&mut params, &grads, schedule.at(epoch));
    }
    let grams: Vec<Mat> = params.iter().map(|m| m.dot(&m.t())).collect();
    let gram_spd: Vec<SpdMatrix> = grams
        .iter()
        .map(|g| SpdMatrix::from_symmetrized(g.clone()).map_err(DkmError::Numerics))
        .collect::<dkm::Result<_>>()?;
    let final_objective =
        dkm::full_rank_objective(&gram_spd, g0, a, &nu, BaseKernel::Linear, &likelihood)?;
    let analytic_objective =
        dkm::full_rank_objective(closed_form, g0, a, &nu, BaseKernel::Linear, &likelihood)?;
    let mut worst = 0.0f64;
    for (gd, cf) in grams.iter().zip(closed_form.iter()) {
        let gd_n = normalize_kernel(gd);
        let cf_n = normalize_kernel(cf.as_mat());
        for (x, y) in gd_n.iter().zip(cf_n.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(GdConfirm {
        grams,
        objective_trace: trace,
        final_objective,
        analytic_objective,
        max_abs_diff_normalized: worst,
    })
}
