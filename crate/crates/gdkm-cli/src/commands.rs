//! Implementations of the CLI subcommands.

use crate::config::{self, RunConfig};
use crate::{CliError, CliResult, EvalArgs, LinearDemoArgs, MakeSynthArgs, SweepArgs, TrainArgs};
use gdkm::dataio::{load_dataset, scale_features, GraphDataset, Split, Task};
use gdkm::dkm::{
    load_checkpoint, predict_probs, save_checkpoint, sparse_forward, Checkpoint, DkmModel,
    InducingScheme, Nu, PreparedGraph, SchemeKind,
};
use gdkm::graphops::{interpolate_lambda, normalize_kipf};
use gdkm::kernels::{arccos_kernel, cka, normalize_kernel, BaseKernel, GttBlock};
use gdkm::numerics::{tri_solve, JitterPolicy, Mat, Side, SpdMatrix};
use gdkm::train::{
    self, evaluate_accuracy, fit, pool_from_graph_ids, prepare, run_linear_demo, sweep_nu,
    LinearDemoConfig, TrainOptions,
};
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).expect("valid json"),
    )?;
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &Mat) -> CliResult<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:.10e}", m[[i, j]]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn format_nu(nu: Nu) -> String {
    if nu.is_infinite() {
        "inf".to_string()
    } else {
        format!("{}", nu.value())
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

struct FoldOutcome {
    fold: usize,
    train_acc: Option<f64>,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
    final_objective: f64,
    diverged_at: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs, force_nngp: bool) -> CliResult<()> {
    let mut cfg = config::resolve(args)?;
    if force_nngp {
        cfg.model.nu = Nu::infinite();
    }
    let ds = load_dataset(&cfg.data)?;
    ensure_dir(&cfg.out)?;
    let folds: Vec<Split> = match &ds.splits {
        gdkm::dataio::Splits::Single(s) => vec![s.clone()],
        gdkm::dataio::Splits::Folds(f) => {
            if cfg.all_folds {
                f.clone()
            } else {
                vec![f[0].clone()]
            }
        }
    };
    let multi = folds.len() > 1;
    let mut outcomes = Vec::with_capacity(folds.len());
    for (fold, split) in folds.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(fold as u64);
        let (model, data) = prepare(&ds, split, &cfg.model, seed)?;
        let metrics_path = if multi {
            cfg.out.join(format!("metrics_fold{fold}.jsonl"))
        } else {
            cfg.out.join("metrics.jsonl")
        };
        let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        let mut writer = |rec: &train::EpochRecord| {
            let line = serde_json::to_string(rec).expect("epoch record serializes");
            let _ = writeln!(metrics_file, "{line}");
            let _ = metrics_file.flush();
        };
        let opts = TrainOptions {
            epochs: cfg.epochs,
            schedule: cfg
                .schedule
                .clone()
                .unwrap_or_else(|| train::LrSchedule::two_stage(cfg.epochs)),
            seed,
            clip_norm: 100.0,
            eval_every: cfg.eval_every,
        };
        let result = fit(model, &data, &opts, Some(&mut writer))?;
        let (train_acc, val_acc, test_acc) = evaluate_accuracy(&result.model, &data, seed)?;
        if fold == 0 {
            let ckpt = Checkpoint {
                model: result.model.clone(),
                scheme_kind: cfg.model.scheme,
                intra_indices: data.scheme.indices.clone(),
                lambda: cfg.model.lambda,
                feature_scaling: cfg.model.feature_scaling,
            };
            save_checkpoint(&cfg.out.join("checkpoint.gdkc"), &ckpt)?;
        }
        outcomes.push(FoldOutcome {
            fold,
            train_acc,
            val_acc,
            test_acc,
            final_objective: result
                .metrics
                .last()
                .map(|r| r.objective)
                .unwrap_or(f64::NAN),
            diverged_at: result.diverged_at,
        });
    }
    let tests: Vec<f64> = outcomes.iter().filter_map(|o| o.test_acc).collect();
    let mean = tests.iter().sum::<f64>() / tests.len().max(1) as f64;
    let std = (tests.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
        / tests.len().max(1) as f64)
        .sqrt();
    let diverged = outcomes.iter().any(|o| o.diverged_at.is_some());
    let final_json = serde_json::json!({
        "dataset": ds.name,
        "task": ds.task,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "nu": format_nu(cfg.model.nu),
        "scheme": cfg.model.scheme,
        "num_inducing": cfg.model.num_inducing,
        "test_acc_mean": if tests.is_empty() { serde_json::Value::Null } else { mean.into() },
        "test_acc_std": if tests.is_empty() { serde_json::Value::Null } else { std.into() },
        "diverged": diverged,
        "folds": outcomes.iter().map(|o| serde_json::json!({
            "fold": o.fold,
            "train_acc": o.train_acc,
            "val_acc": o.val_acc,
            "test_acc": o.test_acc,
            "final_objective": o.final_objective,
            "diverged_at": o.diverged_at,
        })).collect::<Vec<_>>(),
    });
    write_json(&cfg.out.join("final.json"), &final_json)?;
    if diverged {
        return Err(CliError::Numeric(
            "objective diverged; last-good checkpoint retained".into(),
        ));
    }
    Ok(())
}

/// Rebuilds the prepared-data view for a stored checkpoint.
fn data_for_checkpoint(ckpt: &Checkpoint, ds: &GraphDataset) -> CliResult<PreparedGraph> {
    let x = scale_features(&ds.features, ckpt.feature_scaling);
    if x.ncols() != ckpt.model.x_inducing.ncols() {
        return Err(CliError::Data(format!(
            "schema mismatch: dataset has {} features but the checkpoint expects {}",
            x.ncols(),
            ckpt.model.x_inducing.ncols()
        )));
    }
    let mut a = normalize_kipf(&ds.edges);
    if ckpt.lambda > 0.0 {
        a = interpolate_lambda(&a, ckpt.lambda);
    }
    let p_i = ckpt.model.num_inducing();
    let scheme = match ckpt.scheme_kind {
        SchemeKind::Inter => InducingScheme::inter(p_i, &a),
        SchemeKind::Intra => {
            let idx = ckpt.intra_indices.clone().ok_or_else(|| {
                CliError::Data("intra-domain checkpoint is missing inducing indices".into())
            })?;
            if idx.iter().any(|&i| i >= ds.num_nodes()) {
                return Err(CliError::Data(format!(
                    "checkpoint inducing indices exceed the dataset size {}",
                    ds.num_nodes()
                )));
            }
            InducingScheme::intra(idx, &a)
        }
    };
    if ds.num_classes != ckpt.model.num_classes() {
        return Err(CliError::Data(format!(
            "schema mismatch: dataset has {} classes but the checkpoint expects {}",
            ds.num_classes,
            ckpt.model.num_classes()
        )));
    }
    let pool = match (&ds.task, &ds.graph_ids) {
        (Task::Graph, Some(ids)) => Some(Rc::new(pool_from_graph_ids(ids))),
        _ => None,
    };
    let split = ds.splits.primary();
    Ok(PreparedGraph {
        x_t: x,
        scheme,
        targets: ds.labels.clone(),
        train_idx: split.train.clone(),
        val_idx: split.val.clone(),
        test_idx: split.test.clone(),
        num_classes: ds.num_classes,
        pool,
    })
}

/// Full test-test block of the top-layer kernel: taken directly when
/// carried, otherwise reconstructed from the factored blocks.
fn top_kernel_tt(model: &DkmModel, data: &PreparedGraph) -> CliResult<Mat> {
    let stack = sparse_forward(model, data).map_err(CliError::from)?;
    let last = stack
        .layers
        .last()
        .ok_or_else(|| CliError::Numeric("model has no layers".into()))?;
    let g_tt = match &last.gram.g_tt {
        GttBlock::Full(m) => m.clone(),
        _ => {
            let g_ii = SpdMatrix::from_symmetrized(last.gram.g_ii.clone())
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            let h = gdkm::numerics::cholesky(&g_ii, &JitterPolicy::default())
                .map_err(|e| CliError::Numeric(e.to_string()))?
                .factor;
            let v = tri_solve(&h, &last.gram.g_ti.t().to_owned(), Side::Left, false)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            v.t().dot(&v)
        }
    };
    Ok(match model.base_kernel {
        BaseKernel::Linear => g_tt,
        BaseKernel::Arccos => arccos_kernel(
            &SpdMatrix::from_symmetrized(g_tt).map_err(|e| CliError::Numeric(e.to_string()))?,
        )
        .into_mat(),
    })
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    let mut model = ckpt.model.clone();
    if let Some(mc) = args.mc_samples {
        if mc == 0 {
            return Err(CliError::Config("mc_samples must be at least 1".into()));
        }
        model.head.mc_eval = mc;
    }
    let data = data_for_checkpoint(&ckpt, &ds)?;
    let probs = predict_probs(&model, &data, model.head.mc_eval, args.seed)?;
    let test_acc = if data.test_idx.is_empty() {
        None
    } else {
        Some(gdkm::dkm::accuracy(&probs, &data.targets, &data.test_idx))
    };
    let mut per_class = Vec::with_capacity(ds.num_classes);
    for class in 0..ds.num_classes {
        let idx: Vec<usize> = data
            .test_idx
            .iter()
            .copied()
            .filter(|&i| data.targets[i] == class)
            .collect();
        per_class.push(if idx.is_empty() {
            serde_json::Value::Null
        } else {
            gdkm::dkm::accuracy(&probs, &data.targets, &idx).into()
        });
    }
    // kernel alignment of the top-layer kernel against the label kernel
    let cka_label = if ds.task == Task::Node {
        let k_tt = top_kernel_tt(&model, &data)?;
        let n = ds.num_nodes();
        let mut onehot = Mat::zeros((n, ds.num_classes));
        for (i, &l) in ds.labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        let label_kernel = SpdMatrix::from_symmetrized(onehot.dot(&onehot.t()))
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let k = SpdMatrix::from_symmetrized(k_tt).map_err(|e| CliError::Numeric(e.to_string()))?;
        Some(cka(&k, &label_kernel).map_err(|e| CliError::Numeric(e.to_string()))?)
    } else {
        None
    };
    let report = serde_json::json!({
        "dataset": ds.name,
        "checkpoint": args.checkpoint.display().to_string(),
        "mc_samples": model.head.mc_eval,
        "seed": args.seed,
        "test_acc": test_acc,
        "per_class_test_acc": per_class,
        "cka_top_vs_labels": cka_label,
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent() {
            ensure_dir(dir)?;
        }
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let cfg: RunConfig = config::resolve(&args.base)?;
    let nu_grid = config::parse_comma_list(&args.nu_grid, "nu", |s| {
        config::parse_nu(s).map_err(CliError::Config)
    })?;
    let schemes = config::parse_comma_list(&args.schemes, "schemes", config::parse_scheme)?;
    let seeds = config::parse_comma_list(&args.seeds, "seeds", |s| {
        s.parse::<u64>()
            .map_err(|e| CliError::Config(format!("invalid seed {s:?}: {e}")))
    })?;
    if args.jobs == 0 {
        return Err(CliError::Config("jobs must be at least 1".into()));
    }
    let ds = load_dataset(&cfg.data)?;
    ensure_dir(&cfg.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    let results =
        pool.install(|| sweep_nu(&ds, &cfg.model, &nu_grid, &schemes, &seeds, cfg.epochs));

    let mut csv = String::from("dataset,nu,scheme,seed,val_acc,test_acc\n");
    for row in &results.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.dataset,
            format_nu(row.nu),
            match row.scheme {
                SchemeKind::Inter => "inter",
                SchemeKind::Intra => "intra",
            },
            row.seed,
            format_opt(row.val_acc),
            format_opt(row.test_acc),
        ));
    }
    std::fs::write(cfg.out.join("sweep.csv"), csv)?;
    let summary = serde_json::json!({
        "dataset": ds.name,
        "epochs": cfg.epochs,
        "aggregates": results.aggregates,
        "best": results.best,
        "failed_cells": results.rows.iter().filter(|r| r.error.is_some()).map(|r| serde_json::json!({
            "nu": format_nu(r.nu),
            "scheme": r.scheme,
            "seed": r.seed,
            "error": r.error,
        })).collect::<Vec<_>>(),
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

pub fn cmd_linear_demo(args: &LinearDemoArgs) -> CliResult<()> {
    if args.nodes < 2 {
        return Err(CliError::Config("nodes must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&args.edge_prob) {
        return Err(CliError::Config("edge-prob must lie in [0,1]".into()));
    }
    let lambdas = config::parse_comma_list(&args.lambda_grid, "lambda grid", |s| {
        s.parse::<f64>()
            .map_err(|e| CliError::Config(format!("invalid lambda {s:?}: {e}")))
            .and_then(|v| {
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(CliError::Config(format!("lambda {v} outside [0,1]")))
                }
            })
    })?;
    ensure_dir(&args.out)?;
    let mut cka_rows = Vec::new();
    let mut wrote_inputs = false;
    for &lambda in &lambdas {
        let demo_cfg = LinearDemoConfig {
            n_nodes: args.nodes,
            edge_prob: args.edge_prob,
            lambda,
            depth: args.depth,
            seed: args.seed,
            label_jitter: args.label_jitter,
            gd_epochs: 0,
            wishart_init: true,
        };
        let result = run_linear_demo(&demo_cfg).map_err(CliError::from)?;
        if !wrote_inputs {
            write_matrix_csv(
                &args.out.join("input_kernel.csv"),
                &normalize_kernel(result.g0.as_mat()),
            )?;
            write_matrix_csv(
                &args.out.join("label_kernel.csv"),
                result.label_kernel.as_mat(),
            )?;
            let labels_csv: String = result.labels.iter().map(|l| format!("{l}\n")).collect();
            std::fs::write(args.out.join("labels.csv"), labels_csv)?;
            wrote_inputs = true;
        }
        for (l, g) in result.closed_form.iter().enumerate() {
            write_matrix_csv(
                &args
                    .out
                    .join(format!("dkm_lambda{lambda}_layer{}.csv", l + 1)),
                &normalize_kernel(g.as_mat()),
            )?;
        }
        for (l, g) in result.nngp.iter().enumerate() {
            write_matrix_csv(
                &args
                    .out
                    .join(format!("nngp_lambda{lambda}_layer{}.csv", l + 1)),
                &normalize_kernel(g.as_mat()),
            )?;
        }
        cka_rows.push((lambda, result.cka_dkm, result.cka_nngp));
    }
    let mut table = String::from("lambda,cka_dkm,cka_nngp\n");
    for (lambda, dkm, nngp) in &cka_rows {
        table.push_str(&format!("{lambda},{dkm:.6},{nngp:.6}\n"));
    }
    std::fs::write(args.out.join("cka_table.csv"), table)?;

    if args.gd_epochs > 0 {
        let demo_cfg = LinearDemoConfig {
            n_nodes: args.nodes,
            edge_prob: args.edge_prob,
            lambda: args.gd_lambda,
            depth: args.depth,
            seed: args.seed,
            label_jitter: args.label_jitter,
            gd_epochs: args.gd_epochs,
            wishart_init: true,
        };
        let result = run_linear_demo(&demo_cfg).map_err(CliError::from)?;
        let gd = result.gd.expect("gd ran");
        let mut losses = String::from("epoch,objective\n");
        for (e, obj) in gd.objective_trace.iter().enumerate() {
            losses.push_str(&format!("{e},{obj:.10e}\n"));
        }
        std::fs::write(args.out.join("gd_losses.csv"), losses)?;
        for (l, g) in gd.grams.iter().enumerate() {
            write_matrix_csv(
                &args
                    .out
                    .join(format!("gd_lambda{}_layer{}.csv", args.gd_lambda, l + 1)),
                &normalize_kernel(g),
            )?;
        }
        let confirm = serde_json::json!({
            "lambda": args.gd_lambda,
            "epochs": args.gd_epochs,
            "analytic_objective": gd.analytic_objective,
            "gd_final_objective": gd.final_objective,
            "objective_gap": (gd.final_objective - gd.analytic_objective).abs(),
            "max_abs_diff_normalized": gd.max_abs_diff_normalized,
        });
        write_json(&args.out.join("gd_confirm.json"), &confirm)?;
        println!("{}", serde_json::to_string_pretty(&confirm).unwrap());
    }
    Ok(())
}

pub fn cmd_make_synth(args: &MakeSynthArgs) -> CliResult<()> {
    if args.nodes < args.classes || args.classes == 0 {
        return Err(CliError::Config(
            "nodes must be at least the number of classes".into(),
        ));
    }
    for (name, p) in [
        ("edge-prob", args.edge_prob),
        ("p-in", args.p_in),
        ("p-out", args.p_out),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Config(format!("{name} must lie in [0,1]")));
        }
    }
    let ds = match args.kind.as_str() {
        "heterophilous" => gdkm::dataio::make_heterophilous_dataset(
            args.nodes,
            args.edge_prob,
            args.classes,
            args.feature_dim,
            args.separation,
            args.seed,
        ),
        "homophilous" => gdkm::dataio::make_homophilous_dataset(
            args.nodes,
            args.p_in,
            args.p_out,
            args.classes,
            args.feature_dim,
            args.separation,
            args.seed,
        ),
        other => {
            return Err(CliError::Config(format!(
                "unknown kind {other:?} (expected heterophilous|homophilous)"
            )))
        }
    };
    gdkm::dataio::save_dataset(&args.out, &ds)?;
    let h = gdkm::graphops::edge_homophily(&ds.edges, &ds.labels)
        .map(serde_json::Value::from)
        .unwrap_or(serde_json::Value::Null);
    let report = serde_json::json!({
        "name": ds.name,
        "nodes": ds.num_nodes(),
        "edges": ds.edges.num_edges(),
        "classes": ds.num_classes,
        "edge_homophily": h,
        "out": args.out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
