//! Subcommand implementations. Each writes human-readable output to `out`
//! and returns the process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use exolam_core::container::Container;
use exolam_core::exbmdp::{generate_from_seed, TransitionBatch};
use exolam_core::grid_lam::generate_grid;

use crate::config::{resolve_master_seed, ExperimentConfig};
use crate::error::{exit, CliError};
use crate::report::write_report;
use crate::run::{grid_env, linear_env, run_job, Resume};
use crate::store::{RunRow, Store};
use crate::sweep::{jobs_for, run_sweep, SweepSpec};
use crate::verify::run_verify;

fn say(out: &mut dyn Write, s: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", s.as_ref()).map_err(|e| CliError::Io("stdout".into(), e))
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    let master = resolve_master_seed(seed, cfg.master_seed())?;
    cfg.set_master_seed(master);
    Ok(cfg)
}

/// Generates the dataset of one replicate (default: the first listed seed).
pub fn gen(config: &Path, out_path: &Path, seed: Option<u64>, replicate: Option<u64>, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_with_seed(config, seed)?;
    let replicate = replicate.unwrap_or(cfg.seeds()[0]);
    let container = match &cfg {
        ExperimentConfig::Linear(e) => {
            let batch = generate_from_seed(&linear_env(e, replicate)).map_err(CliError::run)?;
            let s = batch.summary();
            say(out, format!("rows               {}", s.rows))?;
            say(out, format!("mean |q|^2         {:.6}", s.mean_q_energy))?;
            say(out, format!("mean |eps|^2       {:.6}", s.mean_eps_energy))?;
            say(out, format!("switch rate        {:.6}", s.switch_rate))?;
            batch.to_container()
        }
        ExperimentConfig::Grid(e) => {
            let data = generate_grid(&grid_env(e, replicate)).map_err(CliError::run)?;
            say(out, format!("transitions        {}", data.len()))?;
            say(out, format!("sigma              {}", data.config.sigma))?;
            data.to_container()
        }
    };
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    container.save(out_path).map_err(CliError::run)?;
    say(out, format!("config {} replicate {replicate} -> {}", cfg.hash(), out_path.display()))?;
    Ok(exit::OK)
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub store: &'a Path,
    pub seed: Option<u64>,
    pub data: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

/// Trains every replicate seed of a config and appends the results.
pub fn train(a: TrainArgs<'_>, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_with_seed(a.config, a.seed)?;
    let store = Store::create(a.store)?;
    let hash = store.save_config(&cfg)?;
    let data = match a.data {
        Some(p) => Some(TransitionBatch::from_container(&Container::load(p).map_err(CliError::run)?).map_err(CliError::run)?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for &seed in cfg.seeds() {
        let resume = match a.resume {
            Some(p) => Some(Resume::from_container(&Container::load(p).map_err(CliError::run)?)?),
            None => None,
        };
        match run_job(&cfg, seed, data.as_ref(), resume) {
            Ok(o) => {
                let ck = store.save_checkpoint(&hash, seed, &o.checkpoint)?;
                store.append_records(&o.records)?;
                let summary: Vec<String> = o.metrics.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
                say(out, format!("{hash} seed={seed} {:.1}s {}", o.wall_seconds, summary.join(" ")))?;
                say(out, format!("  checkpoint {}", ck.display()))?;
                rows.push(RunRow { config_hash: hash.clone(), seed, ok: true, wall_seconds: o.wall_seconds, metrics: o.metrics, error: String::new() });
            }
            Err(e) => {
                say(out, format!("{hash} seed={seed} FAILED: {e}"))?;
                rows.push(RunRow { config_hash: hash.clone(), seed, ok: false, wall_seconds: 0.0, metrics: Default::default(), error: e.to_string() });
                failed.push(e);
            }
        }
    }
    store.append_runs(&rows)?;
    Ok(if failed.is_empty() { exit::OK } else { exit::RUN_FAILED })
}

pub fn sweep(spec_path: &Path, store: &Path, jobs: usize, seed: Option<u64>, progress: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let spec = SweepSpec::load(spec_path)?;
    let master = match seed {
        Some(s) => Some(s),
        None => std::env::var(crate::config::SEED_ENV).ok().map(|_| resolve_master_seed(None, 0)).transpose()?,
    };
    let variants = spec.expand(master)?;
    let n_jobs = jobs_for(&variants).len();
    say(out, format!("sweep {}: {} configs x seeds = {n_jobs} runs on {jobs} workers", spec.name.as_deref().unwrap_or("sweep"), variants.len()))?;
    let store = Store::create(store)?;
    let o = run_sweep(&spec, master, jobs, &store, progress)?;
    say(out, format!("runs      {}", o.runs_csv.display()))?;
    say(out, format!("aggregate {}", o.aggregate_csv.display()))?;
    if o.failed > 0 {
        say(out, format!("{} of {} runs failed", o.failed, o.rows.len()))?;
        for r in o.rows.iter().filter(|r| !r.ok) {
            say(out, format!("  {} seed={}: {}", r.config_hash, r.seed, r.error))?;
        }
        return Ok(exit::RUN_FAILED);
    }
    Ok(exit::OK)
}

pub fn verify(config: &Path, json_out: Option<&Path>, seed: Option<u64>, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_with_seed(config, seed)?;
    let bundle = run_verify(&cfg)?;
    say(out, bundle.table())?;
    if let Some(p) = json_out {
        let text = serde_json::to_string_pretty(&bundle).expect("bundle serializes");
        std::fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))?;
    }
    Ok(if bundle.all_pass { exit::OK } else { exit::VERIFY_FAILED })
}

pub fn report(store: &Path, figure: &str, out_dir: Option<PathBuf>, out: &mut dyn Write) -> Result<i32, CliError> {
    let store = Store::open(store)?;
    let dir = out_dir.unwrap_or_else(|| store.root().join("reports"));
    let (fig, csv, svg) = write_report(&store, figure, &dir)?;
    for name in fig.series() {
        let pts: Vec<String> = fig
            .series_points(&name)
            .iter()
            .map(|p| format!("{}: {:.4} ± {:.4}", p.x, p.stat.mean, p.stat.stderr))
            .collect();
        say(out, format!("{name}: {}", pts.join(", ")))?;
    }
    say(out, format!("wrote {} and {}", csv.display(), svg.display()))?;
    Ok(exit::OK)
}
