//! One training job: data, training, held-out metrics.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use exolam_core::container::Container;
use exolam_core::evaluation::{linear_action_nmse, linear_consistency_loss, metric, var_xi_pair, var_xi_prime, MetricsRecord};
use exolam_core::exbmdp::{generate, generate_from_seed, LinearEnvConfig, TransitionBatch};
use exolam_core::grid_lam::{eval_dataset, evaluate_grid, generate_grid, train_grid, GridEnvConfig, GridTrainConfig, GridTrainState};
use exolam_core::linear_lam::{loss_lam, loss_robust, loss_xexo, train, LinearTrainConfig, TrainState};
use exolam_core::numerics::RngStream;
use exolam_core::oracles::prop3_evidence;

use crate::config::{derived_seed, ExperimentConfig, GridExperiment, LinearExperiment, SeedPurpose};
use crate::error::CliError;

const STREAM_HELDOUT: u64 = 0x40_0001;

/// Final metrics of one (config, seed) job.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: Container,
    pub wall_seconds: f64,
}

/// A checkpoint to continue from instead of a fresh initialization.
pub enum Resume {
    Linear(TrainState),
    Grid(GridTrainState),
}

impl Resume {
    pub fn from_container(c: &Container) -> Result<Self, CliError> {
        match c.meta.get("kind").and_then(|k| k.as_str()) {
            Some("linear_lam") => Ok(Resume::Linear(TrainState::from_container(c).map_err(CliError::run)?.0)),
            Some("grid_lam") => Ok(Resume::Grid(GridTrainState::from_container(c).map_err(CliError::run)?.0)),
            other => Err(CliError::Usage(format!("not a checkpoint (kind {other:?})"))),
        }
    }
}

/// The environment config a replicate actually uses.
pub fn linear_env(e: &LinearExperiment, replicate: u64) -> LinearEnvConfig {
    LinearEnvConfig { seed: derived_seed(e.master_seed, replicate, SeedPurpose::Env), ..e.env.clone() }
}

pub fn linear_train_cfg(e: &LinearExperiment, replicate: u64) -> LinearTrainConfig {
    LinearTrainConfig { seed: derived_seed(e.master_seed, replicate, SeedPurpose::Train), ..e.model.clone() }
}

pub fn grid_env(e: &GridExperiment, replicate: u64) -> GridEnvConfig {
    GridEnvConfig { seed: derived_seed(e.master_seed, replicate, SeedPurpose::Env), ..e.env.clone() }
}

pub fn grid_train_cfg(e: &GridExperiment, replicate: u64) -> GridTrainConfig {
    GridTrainConfig { seed: derived_seed(e.master_seed, replicate, SeedPurpose::Train), ..e.model.clone() }
}

/// Fresh trajectories rendered through the training batch's emissions.
pub fn linear_heldout(e: &LinearExperiment, batch: &TransitionBatch, replicate: u64) -> Result<TransitionBatch, CliError> {
    let cfg = LinearEnvConfig { n_traj: e.eval.heldout_traj, ..batch.config.clone() };
    let rng = RngStream::new(derived_seed(e.master_seed, replicate, SeedPurpose::Eval), STREAM_HELDOUT);
    generate(&cfg, Arc::clone(&batch.emissions), &rng).map_err(CliError::run)
}

/// Runs one job. `data` replaces inline generation for linear experiments.
pub fn run_job(
    cfg: &ExperimentConfig,
    replicate: u64,
    data: Option<&TransitionBatch>,
    resume: Option<Resume>,
) -> Result<RunOutcome, CliError> {
    let t0 = Instant::now();
    let hash = cfg.hash();
    let mut out = match cfg {
        ExperimentConfig::Linear(e) => {
            let resume = match resume {
                None => None,
                Some(Resume::Linear(s)) => Some(s),
                Some(Resume::Grid(_)) => return Err(CliError::Usage("grid checkpoint given to a linear experiment".into())),
            };
            run_linear(e, &hash, replicate, data, resume)?
        }
        ExperimentConfig::Grid(e) => {
            if data.is_some() {
                return Err(CliError::Usage("grid experiments generate their data inline".into()));
            }
            let resume = match resume {
                None => None,
                Some(Resume::Grid(s)) => Some(s),
                Some(Resume::Linear(_)) => return Err(CliError::Usage("linear checkpoint given to a grid experiment".into())),
            };
            run_grid(e, &hash, replicate, resume)?
        }
    };
    out.wall_seconds = t0.elapsed().as_secs_f64();
    Ok(out)
}

fn run_linear(
    e: &LinearExperiment,
    hash: &str,
    replicate: u64,
    data: Option<&TransitionBatch>,
    resume: Option<TrainState>,
) -> Result<RunOutcome, CliError> {
    let generated;
    let batch = match data {
        Some(b) => b,
        None => {
            generated = generate_from_seed(&linear_env(e, replicate)).map_err(CliError::run)?;
            &generated
        }
    };
    let tcfg = linear_train_cfg(e, replicate);
    let trained = train(&tcfg, batch, resume).map_err(CliError::run)?;
    let p = trained.params();
    let held = linear_heldout(e, batch, replicate)?;
    let eval_seed = derived_seed(e.master_seed, replicate, SeedPurpose::Eval);
    let ev = &e.eval;

    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        m.insert(k.to_string(), v);
    };
    if let Some(h) = trained.history.last() {
        put(metric::LOSS_TOTAL, h.loss.total);
    }
    put(metric::LOSS_LAM, loss_lam(p, &held).map_err(CliError::run)?);
    if tcfg.lambda_xexo > 0.0 {
        put(metric::LOSS_XEXO, loss_xexo(p, &held).map_err(CliError::run)?);
    }
    if let (Some(field), Some(_)) = (tcfg.robust_target.field(), p.w.as_ref()) {
        put(metric::LOSS_ROBUST, loss_robust(p, &held, field).map_err(CliError::run)?);
        let rows: Vec<usize> = (0..held.len().min(ev.probe_rows)).collect();
        put(metric::ETA_HAT, prop3_evidence(p, &held, field, &rows).map_err(CliError::run)?.eta_hat);
    }
    put(metric::ACTION_NMSE, linear_action_nmse(p, &held, ev.probe_rows, ev.probe_ridge, eval_seed).map_err(CliError::run)?);
    put(metric::VAR_XI_PRIME, var_xi_prime(p, &held, ev.anchors, ev.draws, eval_seed).map_err(CliError::run)?.value);
    put(metric::VAR_XI_PAIR, var_xi_pair(p, &held, ev.anchors, ev.draws, eval_seed).map_err(CliError::run)?.value);
    if held.has_pairs {
        let rows: Vec<usize> = (0..held.len().min(ev.probe_rows)).collect();
        put(metric::CONSISTENCY_LOSS, linear_consistency_loss(p, &held, &rows).map_err(CliError::run)?);
    }
    Ok(RunOutcome {
        metrics: m,
        records: trained.records(hash, replicate),
        checkpoint: trained.state.to_container(&tcfg),
        wall_seconds: 0.0,
    })
}

fn run_grid(e: &GridExperiment, hash: &str, replicate: u64, resume: Option<GridTrainState>) -> Result<RunOutcome, CliError> {
    let env = grid_env(e, replicate);
    let tcfg = grid_train_cfg(e, replicate);
    let data = generate_grid(&env).map_err(CliError::run)?;
    let log_eval = eval_dataset(&env, tcfg.eval_rows).map_err(CliError::run)?;
    let trained = train_grid(&tcfg, &data, &log_eval, resume).map_err(CliError::run)?;
    let held = eval_dataset(&env, e.eval.rows).map_err(CliError::run)?;
    let fm = evaluate_grid(trained.params(), &held, derived_seed(e.master_seed, replicate, SeedPurpose::Eval)).map_err(CliError::run)?;

    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        m.insert(k.to_string(), v);
    };
    if let Some(h) = trained.history.last() {
        put(metric::LOSS_TOTAL, h.loss.total);
        if let Some(x) = h.loss.xexo {
            put(metric::LOSS_XEXO, x);
        }
        if let Some(r) = h.loss.robust {
            put(metric::LOSS_ROBUST, r);
        }
    }
    put(metric::LOSS_RECON, fm.recon);
    put(metric::LOSS_VQ, fm.vq);
    put(metric::CONSISTENCY_LOSS, fm.consistency);
    put(metric::CODE_DISAGREEMENT, fm.code_disagreement);
    put(metric::EXO_REGION_MSE, fm.exo_region_mse);
    put(metric::ACTION_NMSE, fm.action_nmse);
    Ok(RunOutcome {
        metrics: m,
        records: trained.records(hash, replicate),
        checkpoint: trained.state.to_container(&tcfg),
        wall_seconds: 0.0,
    })
}
