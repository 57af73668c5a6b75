//! Adam training loop with deterministic minibatches and resumable state.

use serde::{Deserialize, Serialize};

use super::objective::{gather_block, grad_total, LossBreakdown, Needs};
use super::{LamError, LinearLamParams};
use crate::container::{Container, Tensor};
use crate::evaluation::{metric, MetricsRecord};
use crate::exbmdp::{Field, TransitionBatch};
use crate::numerics::{adam_state_for, adam_step, AdamConfig, AdamState, RngStream};

const STREAM_INIT: u64 = 0x11_0001;
const STREAM_MINIBATCH: u64 = 0x11_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustTarget {
    None,
    Action,
    Q,
}

impl RobustTarget {
    pub fn field(self) -> Option<Field> {
        match self {
            RobustTarget::None => None,
            RobustTarget::Action => Some(Field::A),
            RobustTarget::Q => Some(Field::Q),
        }
    }
}

fn default_d_z() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_steps() -> u64 {
    20_000
}
fn default_batch() -> usize {
    128
}
fn default_log_every() -> u64 {
    1000
}
fn default_target() -> RobustTarget {
    RobustTarget::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTrainConfig {
    #[serde(default = "default_d_z")]
    pub d_z: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lambda_xexo: f64,
    #[serde(default)]
    pub lambda_robust: f64,
    #[serde(default = "default_target")]
    pub robust_target: RobustTarget,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        Self {
            d_z: default_d_z(),
            lr: default_lr(),
            steps: default_steps(),
            batch_size: default_batch(),
            lambda_xexo: 0.0,
            lambda_robust: 0.0,
            robust_target: RobustTarget::None,
            grad_clip: None,
            seed: 0,
            log_every: default_log_every(),
        }
    }
}

impl LinearTrainConfig {
    pub fn validate(&self) -> Result<(), LamError> {
        let bad = |m: String| Err(LamError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("lambda_xexo", self.lambda_xexo), ("lambda_robust", self.lambda_robust)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.lambda_robust > 0.0 && self.robust_target == RobustTarget::None {
            return bad("lambda_robust > 0 needs robust_target = action or q".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }

    fn needs(&self) -> Needs {
        Needs {
            pairs: self.lambda_xexo > 0.0,
            target: if self.lambda_robust > 0.0 { self.robust_target.field() } else { None },
        }
    }

    fn d_y(&self, batch: &TransitionBatch) -> Option<usize> {
        self.robust_target.field().map(|f| batch.field_dim(f))
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: LinearLamParams,
    pub adam: AdamState<f64>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &LinearTrainConfig, batch: &TransitionBatch) -> Result<Self, LamError> {
        let mut rng = RngStream::new(cfg.seed, STREAM_INIT);
        let params = LinearLamParams::init(batch.d_o(), cfg.d_z, cfg.d_y(batch), &mut rng)?;
        let adam = adam_state_for(AdamConfig::with_lr(cfg.lr), &params.names(), &params.to_list());
        Ok(Self { params, adam, step: 0 })
    }

    pub fn to_container(&self, cfg: &LinearTrainConfig) -> Container {
        let meta = serde_json::json!({ "kind": "linear_lam", "step": self.step, "train": cfg });
        let mut c = Container::new(meta);
        self.params.push_tensors(&mut c, "");
        for (i, name) in self.adam.names.iter().enumerate() {
            let n = self.adam.m[i].len();
            c.push(Tensor::f64(&format!("adam.m.{name}"), &[n], self.adam.m[i].clone()));
            c.push(Tensor::f64(&format!("adam.v.{name}"), &[n], self.adam.v[i].clone()));
        }
        c
    }

    /// Restores a checkpoint written by [`TrainState::to_container`].
    pub fn from_container(c: &Container) -> Result<(Self, LinearTrainConfig), LamError> {
        let bad = |m: &str| LamError::Container(crate::container::ContainerError::Malformed(m.into()));
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("linear_lam") {
            return Err(bad("not a linear_lam checkpoint"));
        }
        let step = c.meta.get("step").and_then(|s| s.as_u64()).ok_or_else(|| bad("missing step"))?;
        let cfg: LinearTrainConfig = serde_json::from_value(c.meta.get("train").cloned().ok_or_else(|| bad("missing train config"))?)
            .map_err(|e| LamError::Container(e.into()))?;
        let params = LinearLamParams::from_tensors(c, "")?;
        let mut adam = adam_state_for(AdamConfig::with_lr(cfg.lr), &params.names(), &params.to_list());
        for (i, name) in params.names().iter().enumerate() {
            let (_, m) = c.f64s(&format!("adam.m.{name}"))?;
            let (_, v) = c.f64s(&format!("adam.v.{name}"))?;
            if m.len() != adam.m[i].len() || v.len() != adam.v[i].len() {
                return Err(bad("optimizer state does not match parameter shapes"));
            }
            adam.m[i] = m.to_vec();
            adam.v[i] = v.to_vec();
        }
        adam.step = step;
        Ok((Self { params, adam, step }, cfg))
    }
}

/// One logged point: minibatch losses averaged over the preceding interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub history: Vec<HistoryPoint>,
}

impl TrainOutput {
    pub fn params(&self) -> &LinearLamParams {
        &self.state.params
    }

    /// History as registry-keyed metric records.
    pub fn records(&self, config_hash: &str, seed: u64) -> Vec<MetricsRecord> {
        let mut out = Vec::new();
        for h in &self.history {
            let mut push = |name: &str, v: f64| out.push(MetricsRecord::new(config_hash, seed, h.step, name, v));
            push(metric::LOSS_TOTAL, h.loss.total);
            push(metric::LOSS_LAM, h.loss.lam);
            if let Some(x) = h.loss.xexo {
                push(metric::LOSS_XEXO, x);
            }
            if let Some(r) = h.loss.robust {
                push(metric::LOSS_ROBUST, r);
            }
        }
        out
    }
}

/// Train from scratch, or continue `resume` up to `cfg.steps` total steps.
///
/// Step `t` draws its minibatch from a stream addressed by `(seed, t)`, so a
/// resumed run follows exactly the trajectory of an uninterrupted one.
pub fn train(cfg: &LinearTrainConfig, batch: &TransitionBatch, resume: Option<TrainState>) -> Result<TrainOutput, LamError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(LamError::Dimension("empty training batch".into()));
    }
    let needs = cfg.needs();
    if needs.pairs && !batch.has_pairs {
        return Err(LamError::MissingPairs);
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(cfg, batch)?,
    };
    let base = RngStream::new(cfg.seed, STREAM_MINIBATCH);
    let n = batch.len();
    let mut history = Vec::new();
    let mut acc = LossBreakdown::default();
    let mut acc_n = 0u64;
    let mut rows = vec![0usize; cfg.batch_size];
    let mut list = state.params.to_list();
    while state.step < cfg.steps {
        let mut rng = base.derive(state.step);
        rows.iter_mut().for_each(|r| *r = rng.below(n));
        let blk = gather_block(batch, &rows, needs)?;
        let (loss, grads) = grad_total(&state.params, &blk, cfg.lambda_xexo, cfg.lambda_robust)?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(LamError::NonFinite {
                step: state.step,
                config: serde_json::to_string(cfg).unwrap_or_default(),
            });
        }
        adam_step(&mut list, &grads, &mut state.adam, cfg.grad_clip)?;
        state.params = LinearLamParams::from_list(&list);
        state.step += 1;

        accumulate(&mut acc, &loss);
        acc_n += 1;
        if state.step % cfg.log_every == 0 || state.step == cfg.steps {
            history.push(HistoryPoint { step: state.step, loss: averaged(&acc, acc_n) });
            acc = LossBreakdown::default();
            acc_n = 0;
        }
    }
    Ok(TrainOutput { state, history })
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.total += l.total;
    acc.lam += l.lam;
    acc.xexo = l.xexo.map(|x| acc.xexo.unwrap_or(0.0) + x);
    acc.robust = l.robust.map(|x| acc.robust.unwrap_or(0.0) + x);
}

fn averaged(acc: &LossBreakdown, n: u64) -> LossBreakdown {
    let k = 1.0 / n.max(1) as f64;
    LossBreakdown {
        total: acc.total * k,
        lam: acc.lam * k,
        xexo: acc.xexo.map(|x| x * k),
        robust: acc.robust.map(|x| x * k),
    }
}

/// Parameters after `steps` of training, discarding history; convenience for
/// sweeps and verifiers.
pub fn train_params(cfg: &LinearTrainConfig, batch: &TransitionBatch) -> Result<LinearLamParams, LamError> {
    Ok(train(cfg, batch, None)?.state.params)
}
