//! Experiment configuration: one JSON document per experiment.
//!
//! The top-level `experiment` key selects the linear or grid section schema.
//! Every section rejects unknown keys, and parse errors carry a JSON pointer
//! to the offending key. The canonical hash is SHA-256 over the normalized
//! config (all defaults filled in, keys sorted, compact encoding).

use std::path::Path;

use exolam_core::exbmdp::LinearEnvConfig;
use exolam_core::grid_lam::{GridEnvConfig, GridTrainConfig};
use exolam_core::linear_lam::{LinearTrainConfig, MomentTrainConfig};
use exolam_core::numerics::RngStream;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "EXOLAM_SEED";

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}

fn default_grid_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearEval {
    /// Ridge penalty of the action probe.
    pub probe_ridge: f64,
    /// Held-out rows fed to the probe (split 80/20 into fit and score).
    pub probe_rows: usize,
    /// Trajectories in the held-out batch rendered from the training emissions.
    pub heldout_traj: usize,
    pub anchors: usize,
    pub draws: usize,
}

impl Default for LinearEval {
    fn default() -> Self {
        Self { probe_ridge: 1e-6, probe_rows: 4096, heldout_traj: 512, anchors: 512, draws: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop2Settings {
    /// Canonical correlations of the synthetic Gaussian pair.
    pub rho: Vec<f64>,
    pub d_z: usize,
    pub samples: usize,
    pub lr: f64,
    pub steps: u64,
    pub seeds: Vec<u64>,
}

impl Default for Prop2Settings {
    fn default() -> Self {
        Self { rho: vec![0.9, 0.8, 0.2, 0.1, 0.0, 0.0], d_z: 2, samples: 20_000, lr: 1e-2, steps: 4000, seeds: default_seeds() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub prop1: MomentTrainConfig,
    /// `p_switch` grid for the leakage-margin monotonicity check.
    pub prop1_grid: Vec<f64>,
    pub prop2: Prop2Settings,
    /// Random parameter draws checked against the robustness bound.
    pub prop3_draws: usize,
    /// Rows of the batch used per bound evaluation.
    pub prop3_rows: usize,
    /// Steps of the trained checkpoint also checked (0 skips training).
    pub prop3_train_steps: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            prop1: MomentTrainConfig::default(),
            prop1_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            prop2: Prop2Settings::default(),
            prop3_draws: 100,
            prop3_rows: 2048,
            prop3_train_steps: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearExperiment {
    #[serde(default)]
    pub env: LinearEnvConfig,
    #[serde(default)]
    pub model: LinearTrainConfig,
    #[serde(default)]
    pub eval: LinearEval,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridEval {
    /// Held-out transitions used for the final metrics.
    pub rows: usize,
}

impl Default for GridEval {
    fn default() -> Self {
        Self { rows: 2048 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridExperiment {
    pub env: GridEnvConfig,
    #[serde(default)]
    pub model: GridTrainConfig,
    #[serde(default)]
    pub eval: GridEval,
    #[serde(default = "default_grid_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExperimentConfig {
    Linear(LinearExperiment),
    Grid(GridExperiment),
}

/// Which seed a run uses for which purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPurpose {
    Env = 1,
    Train = 2,
    Eval = 3,
}

/// Seed for one purpose of one replicate. Depends only on the master seed and
/// the replicate seed, so every config variant of a sweep sees the same data
/// for a given replicate.
pub fn derived_seed(master: u64, replicate: u64, purpose: SeedPurpose) -> u64 {
    RngStream::new(master, 0x5EED).derive(replicate).derive(purpose as u64).next_u64()
}

/// Master seed: `--seed` flag, else `EXOLAM_SEED`, else the config's value.
pub fn resolve_master_seed(flag: Option<u64>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a 64-bit unsigned integer"))),
        Err(_) => Ok(config),
    }
}

impl ExperimentConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::Linear(_) => "linear",
            ExperimentConfig::Grid(_) => "grid",
        }
    }

    pub fn seeds(&self) -> &[u64] {
        match self {
            ExperimentConfig::Linear(e) => &e.seeds,
            ExperimentConfig::Grid(e) => &e.seeds,
        }
    }

    pub fn master_seed(&self) -> u64 {
        match self {
            ExperimentConfig::Linear(e) => e.master_seed,
            ExperimentConfig::Grid(e) => e.master_seed,
        }
    }

    pub fn set_master_seed(&mut self, s: u64) {
        match self {
            ExperimentConfig::Linear(e) => e.master_seed = s,
            ExperimentConfig::Grid(e) => e.master_seed = s,
        }
    }

    /// Parses a config document, reporting the JSON pointer of the first bad key.
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let Value::Object(mut map) = v else {
            return Err(CliError::Config { pointer: String::new(), message: "config must be a JSON object".into() });
        };
        let kind = match map.remove("experiment") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(CliError::Config { pointer: "/experiment".into(), message: "must be a string".into() }),
            None => {
                return Err(CliError::Config { pointer: "/experiment".into(), message: "missing; expected \"linear\" or \"grid\"".into() })
            }
        };
        let body = Value::Object(map);
        let cfg = match kind.as_str() {
            "linear" => ExperimentConfig::Linear(parse_at(body)?),
            "grid" => ExperimentConfig::Grid(parse_at(body)?),
            other => {
                return Err(CliError::Config {
                    pointer: "/experiment".into(),
                    message: format!("unknown experiment {other:?}; expected \"linear\" or \"grid\""),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let v: Value = serde_json::from_str(text).map_err(|e| CliError::Config { pointer: String::new(), message: e.to_string() })?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        Self::from_str(&text)
    }

    /// Semantic checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |pointer: &str, e: &dyn std::fmt::Display| CliError::Config { pointer: pointer.into(), message: e.to_string() };
        if self.seeds().is_empty() {
            return Err(bad("/seeds", &"at least one seed is required"));
        }
        let mut sorted = self.seeds().to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("/seeds", &"seeds must be distinct"));
        }
        match self {
            ExperimentConfig::Linear(e) => {
                e.env.validate().map_err(|x| bad("/env", &x))?;
                e.model.validate().map_err(|x| bad("/model", &x))?;
                if e.eval.draws < 2 || e.eval.anchors == 0 || e.eval.probe_rows < 10 || e.eval.heldout_traj == 0 {
                    return Err(bad("/eval", &"need draws >= 2, anchors >= 1, probe_rows >= 10, heldout_traj >= 1"));
                }
            }
            ExperimentConfig::Grid(e) => {
                e.env.validate().map_err(|x| bad("/env", &x))?;
                e.model.validate().map_err(|x| bad("/model", &x))?;
                if e.eval.rows < 10 {
                    return Err(bad("/eval/rows", &"need at least 10 held-out rows"));
                }
            }
        }
        Ok(())
    }

    /// Normalized JSON: every default filled in, `experiment` tag included.
    pub fn to_value(&self) -> Value {
        let (kind, mut v) = match self {
            ExperimentConfig::Linear(e) => ("linear", serde_json::to_value(e)),
            ExperimentConfig::Grid(e) => ("grid", serde_json::to_value(e)),
        };
        let v = v.as_mut().expect("config serializes");
        v.as_object_mut().expect("config is an object").insert("experiment".into(), Value::String(kind.into()));
        v.take()
    }

    /// Compact JSON with sorted keys.
    pub fn canonical_json(&self) -> String {
        // serde_json's default map is ordered, so serialization is canonical.
        serde_json::to_string(&self.to_value()).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_at<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let pointer = if path == "." { String::new() } else { format!("/{}", path.replace('.', "/")) };
        CliError::Config { pointer, message: e.into_inner().to_string() }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_and_hash_is_stable() {
        let a = ExperimentConfig::from_str(r#"{"experiment":"linear"}"#).unwrap();
        let b = ExperimentConfig::from_str(r#"{"experiment":"linear","env":{"alpha":0.5},"seeds":[0,1,2,3]}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = ExperimentConfig::from_str(r#"{"experiment":"linear","env":{"p_switch":0.1}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_json_round_trips() {
        let a = ExperimentConfig::from_str(r#"{"experiment":"grid","env":{"sigma":0.5}}"#).unwrap();
        let back = ExperimentConfig::from_str(&a.canonical_json()).unwrap();
        assert_eq!(a, back);
        assert_eq!(a.canonical_json(), back.canonical_json());
    }

    #[test]
    fn unknown_key_reports_its_pointer() {
        let e = ExperimentConfig::from_str(r#"{"experiment":"linear","env":{"p_swich":0.1}}"#).unwrap_err();
        match e {
            CliError::Config { pointer, message } => {
                assert_eq!(pointer, "/env/p_swich", "{message}");
                assert!(message.contains("p_swich"));
            }
            other => panic!("{other:?}"),
        }
        let e = ExperimentConfig::from_str(r#"{"experiment":"linear","model":{"lr":"fast"}}"#).unwrap_err();
        assert!(matches!(e, CliError::Config { ref pointer, .. } if pointer == "/model/lr"), "{e:?}");
        let e = ExperimentConfig::from_str(r#"{"experiment":"linear","extra":1}"#).unwrap_err();
        assert!(e.to_string().contains("extra"));
    }

    #[test]
    fn generator_preconditions_are_schema_errors() {
        let e = ExperimentConfig::from_str(r#"{"experiment":"linear","env":{"n_xi":1,"p_switch":0.2}}"#).unwrap_err();
        assert!(matches!(e, CliError::Config { ref pointer, .. } if pointer == "/env"), "{e:?}");
        assert!(ExperimentConfig::from_str(r#"{"experiment":"maze"}"#).is_err());
        assert!(ExperimentConfig::from_str(r#"{"experiment":"linear","seeds":[]}"#).is_err());
        assert!(ExperimentConfig::from_str(r#"{"experiment":"linear","seeds":[1,1]}"#).is_err());
    }

    #[test]
    fn derived_seeds_are_distinct_per_purpose_and_replicate() {
        let mut seen = std::collections::HashSet::new();
        for r in 0..4 {
            for p in [SeedPurpose::Env, SeedPurpose::Train, SeedPurpose::Eval] {
                assert!(seen.insert(derived_seed(7, r, p)));
            }
        }
        assert_ne!(derived_seed(7, 0, SeedPurpose::Env), derived_seed(8, 0, SeedPurpose::Env));
    }
}
