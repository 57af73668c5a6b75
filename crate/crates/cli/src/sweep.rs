//! Sweeps: a base config crossed with axes of values, each run over every
//! replicate seed on a bounded worker pool.
//!
//! An axis value is written at its dotted path in the base document. When
//! both the value and the existing entry are objects they are merged key by
//! key, which is how variant presets (e.g. a set of loss weights) are swept.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::run::run_job;
use crate::store::{aggregate, aggregate_header, aggregate_record, run_header, run_record, RunRow, Store};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted path into the config document, e.g. `env.p_switch`.
    pub path: String,
    pub values: Vec<Value>,
    /// Optional display label per value; defaults to the compact JSON value.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    /// Column name in the sweep CSVs; defaults to `path`.
    #[serde(default)]
    pub name: Option<String>,
}

impl Axis {
    pub fn column(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.path.clone())
    }

    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => match &self.values[i] {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            },
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Used to name the output directory; defaults to the spec file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub base: Value,
    #[serde(default)]
    pub axes: Vec<Axis>,
}

/// One point of the cross product.
#[derive(Clone, Debug)]
pub struct Variant {
    pub config: ExperimentConfig,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Job {
    pub variant: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut spec: SweepSpec = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            pointer: format!("/{}", e.path().to_string().replace('.', "/")).replace("//", "/"),
            message: e.into_inner().to_string(),
        })?;
        if spec.name.is_none() {
            spec.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(spec)
    }

    pub fn from_str(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config { pointer: String::new(), message: e.to_string() })
    }

    pub fn columns(&self) -> Vec<String> {
        self.axes.iter().map(Axis::column).collect()
    }

    /// Cross product in axis order, first axis slowest. `master` overrides
    /// every variant's master seed when given.
    pub fn expand(&self, master: Option<u64>) -> Result<Vec<Variant>, CliError> {
        for (k, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(CliError::Config { pointer: format!("/axes/{k}/values"), message: "axis has no values".into() });
            }
            if let Some(l) = &a.labels {
                if l.len() != a.values.len() {
                    return Err(CliError::Config {
                        pointer: format!("/axes/{k}/labels"),
                        message: format!("{} labels for {} values", l.len(), a.values.len()),
                    });
                }
            }
        }
        let total: usize = self.axes.iter().map(|a| a.values.len()).product();
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut idx = Vec::with_capacity(self.axes.len());
            let mut rest = flat;
            for a in self.axes.iter().rev() {
                idx.push(rest % a.values.len());
                rest /= a.values.len();
            }
            idx.reverse();
            let mut doc = self.base.clone();
            for (a, &i) in self.axes.iter().zip(&idx) {
                set_path(&mut doc, &a.path, a.values[i].clone());
            }
            let mut config = ExperimentConfig::from_value(doc).map_err(|e| match e {
                CliError::Config { pointer, message } => {
                    let at: Vec<String> = self.axes.iter().zip(&idx).map(|(a, &i)| format!("{}={}", a.column(), a.label(i))).collect();
                    CliError::Config { pointer: format!("/base{pointer}"), message: format!("{message} (variant {})", at.join(", ")) }
                }
                other => other,
            })?;
            if let Some(m) = master {
                config.set_master_seed(m);
            }
            out.push(Variant { config, labels: self.axes.iter().zip(&idx).map(|(a, &i)| a.label(i)).collect() });
        }
        Ok(out)
    }
}

/// Writes `value` at a dotted path, creating objects on the way and merging
/// objects into objects.
pub fn set_path(doc: &mut Value, path: &str, value: Value) {
    let mut cur = doc;
    for key in path.split('.').filter(|k| !k.is_empty()) {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur.as_object_mut().expect("object").entry(key.to_string()).or_insert(Value::Null);
    }
    merge(cur, value);
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                merge(d.entry(k).or_insert(Value::Null), v);
            }
        }
        (d, s) => *d = s,
    }
}

pub fn jobs_for(variants: &[Variant]) -> Vec<Job> {
    variants
        .iter()
        .enumerate()
        .flat_map(|(v, var)| var.config.seeds().iter().map(move |&seed| Job { variant: v, seed }))
        .collect()
}

pub struct SweepOutcome {
    pub rows: Vec<RunRow>,
    pub runs_csv: std::path::PathBuf,
    pub aggregate_csv: std::path::PathBuf,
    pub failed: usize,
}

/// Runs every job on a pool of `workers` threads and writes the sweep's
/// run and aggregate tables. Rows are emitted in (config hash, seed) order,
/// so the aggregate table does not depend on scheduling.
pub fn run_sweep(
    spec: &SweepSpec,
    master: Option<u64>,
    workers: usize,
    store: &Store,
    progress: bool,
) -> Result<SweepOutcome, CliError> {
    let variants = spec.expand(master)?;
    let jobs = jobs_for(&variants);
    for v in &variants {
        store.save_config(&v.config)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let total = jobs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<(RunRow, Option<crate::run::RunOutcome>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let cfg = &variants[job.variant].config;
                let hash = cfg.hash();
                let res = run_job(cfg, job.seed, None, None);
                let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                if progress {
                    let status = if res.is_ok() { "ok" } else { "FAILED" };
                    eprintln!("[{k}/{total}] {hash} seed={} {}: {status}", job.seed, variants[job.variant].labels.join(" "));
                }
                match res {
                    Ok(o) => (
                        RunRow {
                            config_hash: hash,
                            seed: job.seed,
                            ok: true,
                            wall_seconds: o.wall_seconds,
                            metrics: o.metrics.clone(),
                            error: String::new(),
                        },
                        Some(o),
                    ),
                    Err(e) => (
                        RunRow {
                            config_hash: hash,
                            seed: job.seed,
                            ok: false,
                            wall_seconds: 0.0,
                            metrics: Default::default(),
                            error: e.to_string(),
                        },
                        None,
                    ),
                }
            })
            .collect()
    });

    // Single writer from here on.
    let mut rows = Vec::with_capacity(results.len());
    for (row, outcome) in results {
        if let Some(o) = outcome {
            store.save_checkpoint(&row.config_hash, row.seed, &o.checkpoint)?;
            store.append_records(&o.records)?;
        }
        rows.push(row);
    }
    rows.sort_by(|a, b| (&a.config_hash, a.seed).cmp(&(&b.config_hash, b.seed)));
    store.append_runs(&rows)?;

    let name = spec.name.clone().unwrap_or_else(|| "sweep".into());
    let dir = store.root().join("sweeps").join(&name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let columns = spec.columns();
    let labels_of = |hash: &str| -> Vec<String> {
        variants.iter().find(|v| v.config.hash() == hash).map(|v| v.labels.clone()).unwrap_or_default()
    };

    let runs_csv = dir.join("runs.csv");
    write_csv(&runs_csv, &run_header(&columns), rows.iter().map(|r| run_record(r, &labels_of(&r.config_hash))))?;
    let aggregate_csv = dir.join("aggregate.csv");
    let agg = aggregate(&rows);
    write_csv(&aggregate_csv, &aggregate_header(&columns), agg.iter().map(|a| aggregate_record(a, &labels_of(&a.config_hash))))?;
    let failed = rows.iter().filter(|r| !r.ok).count();
    Ok(SweepOutcome { rows, runs_csv, aggregate_csv, failed })
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(path.display().to_string(), e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
