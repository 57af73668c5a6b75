//! Results store: a directory of append-only CSV tables plus the configs
//! their hashes refer to.
//!
//! ```text
//! <root>/configs/<hash>.json        canonical config
//! <root>/runs.csv                   one row per finished (config, seed) job
//! <root>/records.csv                training-history metric records
//! <root>/checkpoints/<hash>-<seed>.bin
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use exolam_core::container::Container;
use exolam_core::evaluation::{metric, MetricsRecord};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const RUNS_FILE: &str = "runs.csv";
pub const RECORDS_FILE: &str = "records.csv";

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub config_hash: String,
    pub seed: u64,
    pub ok: bool,
    pub wall_seconds: f64,
    pub metrics: BTreeMap<String, f64>,
    pub error: String,
}

/// Fixed run-table columns; metric columns follow in registry order, then `error`.
pub const RUN_COLUMNS: &[&str] = &["config_hash", "seed", "status", "wall_seconds"];

pub fn run_header(extra_leading: &[String]) -> Vec<String> {
    let mut h: Vec<String> = vec![RUN_COLUMNS[0].to_string()];
    h.extend(extra_leading.iter().cloned());
    h.extend(RUN_COLUMNS[1..].iter().map(|s| s.to_string()));
    h.extend(metric::ALL.iter().map(|s| s.to_string()));
    h.push("error".into());
    h
}

pub fn run_record(r: &RunRow, extra_leading: &[String]) -> Vec<String> {
    let mut v = vec![r.config_hash.clone()];
    v.extend(extra_leading.iter().cloned());
    v.push(r.seed.to_string());
    v.push(if r.ok { "ok" } else { "failed" }.into());
    v.push(format!("{:.3}", r.wall_seconds));
    for m in metric::ALL {
        v.push(r.metrics.get(*m).map(|x| fmt_float(*x)).unwrap_or_default());
    }
    v.push(r.error.clone());
    v
}

pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        for d in [root.to_path_buf(), root.join("configs"), root.join("checkpoints")] {
            fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self, CliError> {
        if !root.join(RUNS_FILE).is_file() {
            return Err(CliError::Missing(format!("no results store at {} (missing {RUNS_FILE})", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save_config(&self, cfg: &ExperimentConfig) -> Result<String, CliError> {
        let hash = cfg.hash();
        let path = self.root.join("configs").join(format!("{hash}.json"));
        if !path.exists() {
            let text = serde_json::to_string_pretty(&cfg.to_value()).expect("config serializes");
            fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        }
        Ok(hash)
    }

    pub fn load_config(&self, hash: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(&self.root.join("configs").join(format!("{hash}.json")))
    }

    pub fn checkpoint_path(&self, hash: &str, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{hash}-{seed}.bin"))
    }

    pub fn save_checkpoint(&self, hash: &str, seed: u64, c: &Container) -> Result<PathBuf, CliError> {
        let path = self.checkpoint_path(hash, seed);
        c.save(&path).map_err(CliError::run)?;
        Ok(path)
    }

    fn append(&self, file: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let path = self.root.join(file);
        let fresh = !path.exists();
        let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = csv::Writer::from_writer(f);
        let io = |e: csv::Error| CliError::Io(path.display().to_string(), e.into());
        if fresh {
            w.write_record(header).map_err(io)?;
        }
        for r in rows {
            w.write_record(&r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    pub fn append_runs(&self, rows: &[RunRow]) -> Result<(), CliError> {
        self.append(RUNS_FILE, &run_header(&[]), rows.iter().map(|r| run_record(r, &[])))
    }

    pub fn append_records(&self, records: &[MetricsRecord]) -> Result<(), CliError> {
        let header: Vec<String> = ["config_hash", "seed", "step", "metric", "value"].map(String::from).to_vec();
        self.append(
            RECORDS_FILE,
            &header,
            records.iter().map(|r| vec![r.config_hash.clone(), r.seed.to_string(), r.step.to_string(), r.metric.clone(), fmt_float(r.value)]),
        )
    }

    /// All run rows; a later row for the same (config, seed) replaces an earlier one.
    pub fn read_runs(&self) -> Result<Vec<RunRow>, CliError> {
        let path = self.root.join(RUNS_FILE);
        let mut rd = csv::Reader::from_path(&path).map_err(|e| CliError::Io(path.display().to_string(), e.into()))?;
        let header = rd.headers().map_err(|e| CliError::Io(path.display().to_string(), e.into()))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (Some(ch), Some(sd), Some(st), Some(ws)) = (col("config_hash"), col("seed"), col("status"), col("wall_seconds")) else {
            return Err(CliError::Missing(format!("{} lacks the fixed run columns", path.display())));
        };
        let err_col = col("error");
        let metric_cols: Vec<(usize, &str)> = metric::ALL.iter().filter_map(|m| col(m).map(|i| (i, *m))).collect();
        let mut by_key: BTreeMap<(String, u64), RunRow> = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| CliError::Io(path.display().to_string(), e.into()))?;
            let bad = |what: &str| CliError::Missing(format!("{}: malformed {what} in row {:?}", path.display(), rec.position()));
            let seed = rec[sd].parse().map_err(|_| bad("seed"))?;
            let mut metrics = BTreeMap::new();
            for &(i, m) in &metric_cols {
                if !rec[i].is_empty() {
                    metrics.insert(m.to_string(), rec[i].parse().map_err(|_| bad(m))?);
                }
            }
            let row = RunRow {
                config_hash: rec[ch].to_string(),
                seed,
                ok: &rec[st] == "ok",
                wall_seconds: rec[ws].parse().unwrap_or(0.0),
                metrics,
                error: err_col.map(|i| rec[i].to_string()).unwrap_or_default(),
            };
            by_key.insert((row.config_hash.clone(), row.seed), row);
        }
        Ok(by_key.into_values().collect())
    }
}

/// Mean and standard error (sample std / √n) of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { n, mean, stderr })
    }
}

/// Seed-aggregated metrics of one config.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub config_hash: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub stats: BTreeMap<String, Stat>,
}

/// Groups successful rows by config; output sorted by config hash, and each
/// group's values are taken in seed order so sums are order-independent.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.config_hash).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(hash, mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let ok: Vec<&RunRow> = rs.iter().copied().filter(|r| r.ok).collect();
            let mut stats = BTreeMap::new();
            for m in metric::ALL {
                let xs: Vec<f64> = ok.iter().filter_map(|r| r.metrics.get(*m).copied()).collect();
                if let Some(s) = Stat::of(&xs) {
                    stats.insert(m.to_string(), s);
                }
            }
            AggregateRow { config_hash: hash.to_string(), n_ok: ok.len(), n_failed: rs.len() - ok.len(), stats }
        })
        .collect()
}

pub fn aggregate_header(axis_columns: &[String]) -> Vec<String> {
    let mut h = vec!["config_hash".to_string()];
    h.extend(axis_columns.iter().cloned());
    h.push("n_seeds".into());
    h.push("n_failed".into());
    for m in metric::ALL {
        h.push(format!("{m}_mean"));
        h.push(format!("{m}_stderr"));
    }
    h
}

pub fn aggregate_record(a: &AggregateRow, axis_values: &[String]) -> Vec<String> {
    let mut v = vec![a.config_hash.clone()];
    v.extend(axis_values.iter().cloned());
    v.push(a.n_ok.to_string());
    v.push(a.n_failed.to_string());
    for m in metric::ALL {
        match a.stats.get(*m) {
            Some(s) => {
                v.push(fmt_float(s.mean));
                v.push(fmt_float(s.stderr));
            }
            None => v.extend([String::new(), String::new()]),
        }
    }
    v
}
