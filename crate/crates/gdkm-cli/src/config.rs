//! Run configuration: JSON file merged with command-line overrides, then
//! validated before any compute.

use crate::{CliError, CliResult, TrainArgs};
use gdkm::dataio::FeatureScaling;
use gdkm::dkm::{GttMode, Nu, SchemeKind};
use gdkm::kernels::BaseKernel;
use gdkm::train::{LrSchedule, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub model: ModelConfig,
    /// Defaults to the two-stage schedule over `epochs`.
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    /// Train on every fold of a fold-based dataset.
    #[serde(default = "default_true")]
    pub all_folds: bool,
}

fn default_epochs() -> usize {
    300
}

fn default_eval_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

pub fn parse_nu(s: &str) -> Result<Nu, String> {
    if s == "inf" || s == "Infinity" {
        return Ok(Nu::infinite());
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(Nu::finite(v)),
        Ok(v) => Err(format!(
            "nu must be non-negative and finite or \"inf\", got {v}"
        )),
        Err(e) => Err(format!("invalid nu {s:?}: {e}")),
    }
}

pub fn parse_kernel(s: &str) -> CliResult<BaseKernel> {
    match s {
        "arccos" => Ok(BaseKernel::Arccos),
        "linear" => Ok(BaseKernel::Linear),
        other => Err(CliError::Config(format!(
            "unknown kernel {other:?} (expected arccos|linear)"
        ))),
    }
}

pub fn parse_scheme(s: &str) -> CliResult<SchemeKind> {
    match s {
        "inter" => Ok(SchemeKind::Inter),
        "intra" => Ok(SchemeKind::Intra),
        other => Err(CliError::Config(format!(
            "unknown scheme {other:?} (expected inter|intra)"
        ))),
    }
}

pub fn parse_gtt(s: &str) -> CliResult<GttMode> {
    match s {
        "nystrom" => Ok(GttMode::Nystrom),
        "exact" => Ok(GttMode::Exact),
        other => Err(CliError::Config(format!(
            "unknown Gtt mode {other:?} (expected nystrom|exact)"
        ))),
    }
}

pub fn parse_scaling(s: &str) -> CliResult<FeatureScaling> {
    match s {
        "sum_squares" => Ok(FeatureScaling::SumSquares),
        "norm" => Ok(FeatureScaling::Norm),
        "none" => Ok(FeatureScaling::None),
        other => Err(CliError::Config(format!(
            "unknown feature scaling {other:?} (expected sum_squares|norm|none)"
        ))),
    }
}

/// Loads the config file (if any), applies flag overrides, validates.
pub fn resolve(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg: RunConfig =
        match &args.config {
            Some(path) => {
                let raw = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&raw)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => {
                let data = args.data.clone().ok_or_else(|| {
                    CliError::Config("either --config or --data is required".into())
                })?;
                let out = args.out.clone().ok_or_else(|| {
                    CliError::Config("either --config or --out is required".into())
                })?;
                RunConfig {
                    data,
                    out,
                    seed: 0,
                    epochs: default_epochs(),
                    eval_every: default_eval_every(),
                    model: ModelConfig::default(),
                    schedule: None,
                    all_folds: true,
                }
            }
        };
    if let Some(v) = &args.data {
        cfg.data = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.depth {
        cfg.model.depth = v;
    }
    if let Some(v) = args.nu {
        cfg.model.nu = v;
    }
    if let Some(v) = &args.kernel {
        cfg.model.base_kernel = parse_kernel(v)?;
    }
    if let Some(v) = &args.gtt {
        cfg.model.gtt_mode = parse_gtt(v)?;
    }
    if let Some(v) = &args.scheme {
        cfg.model.scheme = parse_scheme(v)?;
    }
    if let Some(v) = args.inducing {
        cfg.model.num_inducing = v;
    }
    if let Some(v) = args.lambda {
        cfg.model.lambda = v;
    }
    if let Some(v) = &args.scaling {
        cfg.model.feature_scaling = parse_scaling(v)?;
    }
    if let Some(v) = args.centering {
        cfg.model.centering.enabled = v;
    }
    if let Some(v) = args.learn_affine {
        cfg.model.centering.learn_affine = v;
    }
    if let Some(v) = args.mc_train {
        cfg.model.mc_train = v;
    }
    if let Some(v) = args.mc_eval {
        cfg.model.mc_eval = v;
    }
    if let Some(v) = args.all_folds {
        cfg.all_folds = v;
    }
    apply_schedule_overrides(&mut cfg, args)?;
    validate(&cfg)?;
    Ok(cfg)
}

fn apply_schedule_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> CliResult<()> {
    if let Some(kind) = &args.lr_schedule {
        cfg.schedule = Some(match kind.as_str() {
            "two_stage" => LrSchedule::two_stage(cfg.epochs),
            "polynomial" => LrSchedule::polynomial(),
            "constant" => LrSchedule::Constant {
                lr: args.lr_init.unwrap_or(1e-2),
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown schedule {other:?} (expected two_stage|polynomial|constant)"
                )))
            }
        });
    }
    let mut schedule = cfg
        .schedule
        .clone()
        .unwrap_or_else(|| LrSchedule::two_stage(cfg.epochs));
    match &mut schedule {
        LrSchedule::TwoStage {
            base,
            peak,
            floor,
            warm_fraction,
            total_epochs,
        } => {
            if let Some(v) = args.lr_base {
                *base = v;
            }
            if let Some(v) = args.lr_peak {
                *peak = v;
            }
            if let Some(v) = args.lr_floor {
                *floor = v;
            }
            if let Some(v) = args.lr_warm_fraction {
                *warm_fraction = v;
            }
            *total_epochs = cfg.epochs;
        }
        LrSchedule::Polynomial { init, power } => {
            if let Some(v) = args.lr_init {
                *init = v;
            }
            if let Some(v) = args.lr_power {
                *power = v;
            }
        }
        LrSchedule::Constant { lr } => {
            if let Some(v) = args.lr_init {
                *lr = v;
            }
        }
    }
    cfg.schedule = Some(schedule);
    Ok(())
}

/// Schema validation; every violation is a config error (exit code 2).
pub fn validate(cfg: &RunConfig) -> CliResult<()> {
    let m = &cfg.model;
    if m.depth == 0 {
        return Err(CliError::Config("depth must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&m.lambda) {
        return Err(CliError::Config(format!(
            "lambda must lie in [0,1], got {}",
            m.lambda
        )));
    }
    if m.nu.value() < 0.0 {
        return Err(CliError::Config("nu must be non-negative".into()));
    }
    if m.num_inducing == 0 {
        return Err(CliError::Config("num_inducing must be at least 1".into()));
    }
    if m.mc_train == 0 || m.mc_eval == 0 {
        return Err(CliError::Config("mc samples must be at least 1".into()));
    }
    if !m.centering.gamma.is_finite() || !m.centering.beta.is_finite() {
        return Err(CliError::Config(
            "centering gamma/beta must be finite".into(),
        ));
    }
    if let Some(s) = &cfg.schedule {
        let probe = [s.at(0), s.at(cfg.epochs / 2), s.at(cfg.epochs)];
        if probe.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CliError::Config(
                "learning-rate schedule produces invalid rates".into(),
            ));
        }
    }
    Ok(())
}

pub fn parse_comma_list<T, F>(s: &str, what: &str, parse: F) -> CliResult<Vec<T>>
where
    F: Fn(&str) -> CliResult<T>,
{
    let items: Vec<&str> = s
        .split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .collect();
    if items.is_empty() {
        return Err(CliError::Config(format!("{what} list is empty")));
    }
    items.into_iter().map(parse).collect()
}
