//! Objectives, training loop and evaluation for the grid LAM.

use serde::{Deserialize, Serialize};

use super::env::{Frame, GridDataset, GridEnvConfig, EXO_REGION, PIXELS};
use super::model::{bind, decode_on, encode_on, layout, pack, GridLamParams, GridModelConfig, Layout};
use super::tape::{Real, Tape, Tensor, Var};
use super::GridError;
use crate::container::{Container, ContainerError};
use crate::evaluation::{self, metric, MetricsRecord};
use crate::numerics::{splitmix64, AdamConfig, AdamState, Matrix, RngStream};

const STREAM_INIT: u64 = 0x22_0001;
const STREAM_MINIBATCH: u64 = 0x22_0002;
const STREAM_LABELS: u64 = 0x22_0003;
const STREAM_PROBE: u64 = 0x22_0004;
const EVAL_SEED_TAG: u64 = 0x6772_6964_6576_616c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridObjective {
    /// Reconstruction + VQ only.
    Vanilla,
    /// Adds reconstruction of `obs'` from the paired stream's latent.
    Xexo,
    /// Adds one-hot action prediction from `z_pre` on the labeled subset.
    Robust,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridTrainConfig {
    pub model: GridModelConfig,
    pub objective: GridObjective,
    /// Weight of the auxiliary term.
    pub lambda: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Fraction of transitions whose action labels the robust term may use.
    pub label_fraction: f64,
    /// Labeled rows drawn per step for the robust term.
    pub label_batch: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    /// Size of the held-out set used for logged metrics.
    pub eval_rows: usize,
}

impl Default for GridTrainConfig {
    fn default() -> Self {
        Self {
            model: GridModelConfig::default(),
            objective: GridObjective::Vanilla,
            lambda: 1.0,
            lr: 3e-4,
            steps: 16_000,
            batch_size: 128,
            label_fraction: 0.01,
            label_batch: 32,
            grad_clip: Some(5.0),
            seed: 0,
            log_every: 1000,
            eval_rows: 1024,
        }
    }
}

impl GridTrainConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        self.model.validate()?;
        let bad = |m: String| Err(GridError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.label_batch == 0 || self.log_every == 0 || self.eval_rows < 2 {
            return bad("batch_size, label_batch and log_every must be positive; eval_rows at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return bad(format!("label_fraction must lie in [0, 1], got {}", self.label_fraction));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Held-out transitions for metrics: same σ, independent seed.
pub fn eval_dataset(env: &GridEnvConfig, rows: usize) -> Result<GridDataset, GridError> {
    super::env::generate_grid(&GridEnvConfig { sigma: env.sigma, n_steps: rows, seed: splitmix64(env.seed ^ EVAL_SEED_TAG) })
}

/// Indices whose action labels are visible: `ceil(fraction · n)` rows chosen
/// by a seeded shuffle.
pub fn labeled_rows(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed, STREAM_LABELS).shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Packed inputs for one loss evaluation.
#[derive(Clone, Debug)]
pub struct GridBatch<T> {
    /// `[N·16, 2]`: (obs, obs') as channels.
    pub pair: Tensor<T>,
    pub obs: Tensor<T>,
    pub obs_next: Tensor<T>,
    /// `[N·16, 2]`: the paired stream's (õ, õ').
    pub pair_tilde: Option<Tensor<T>>,
    /// `[M·16, 2]` labeled inputs and `[M, d_y]` one-hot targets.
    pub labeled: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> GridBatch<T> {
    pub fn gather(data: &GridDataset, rows: &[usize], objective: GridObjective, labeled: &[usize], d_y: usize) -> Self {
        let pick = |f: fn(&super::env::GridTransition) -> Frame, rows: &[usize]| -> Vec<Frame> {
            rows.iter().map(|&r| f(&data.transitions[r])).collect()
        };
        let obs = pick(|t| t.obs, rows);
        let next = pick(|t| t.obs_next, rows);
        let pair_tilde = (objective == GridObjective::Xexo).then(|| {
            let ot = pick(|t| t.obs_tilde, rows);
            let otn = pick(|t| t.obs_tilde_next, rows);
            pack(&[&ot, &otn])
        });
        let labeled = (objective == GridObjective::Robust && !labeled.is_empty()).then(|| {
            let lo = pick(|t| t.obs, labeled);
            let ln = pick(|t| t.obs_next, labeled);
            let mut y = Tensor::zeros(labeled.len(), d_y);
            for (i, &r) in labeled.iter().enumerate() {
                y.data[i * d_y + data.transitions[r].action.index()] = T::one();
            }
            (pack(&[&lo, &ln]), y)
        });
        Self { pair: pack(&[&obs, &next]), obs: pack(&[&obs]), obs_next: pack(&[&next]), pair_tilde, labeled }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridLosses {
    pub total: f64,
    pub recon: f64,
    pub vq: f64,
    pub xexo: Option<f64>,
    pub robust: Option<f64>,
}

/// Losses (and parameter gradients when `want_grad`) on `batch`.
///
/// With `straight_through = false` the decoder reads `z_pre` directly and the
/// VQ term is reported but left out of the total, so the total is a smooth
/// function of every parameter; that variant exists for gradient checking.
pub(crate) fn losses_on<T: Real>(
    tensors: &[Tensor<T>],
    lay: &Layout,
    cfg: &GridModelConfig,
    batch: &GridBatch<T>,
    lambda: f64,
    want_grad: bool,
    straight_through: bool,
) -> (GridLosses, Option<Vec<Tensor<T>>>) {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, tensors);
    let cb = vars[lay.codebook];
    let latent = |tape: &mut Tape<T>, input: Var| -> (Var, Var, Vec<usize>) {
        let z = encode_on(tape, &vars, lay, input);
        if straight_through {
            let (q, codes) = tape.quantize(z, cb);
            (z, q, codes)
        } else {
            let codes = (0..tape.value(z).rows).map(|i| super::tape::nearest_code(tape.value(z).row(i), tape.value(cb))).collect();
            (z, z, codes)
        }
    };

    let input = tape.leaf(batch.pair.clone());
    let obs = tape.leaf(batch.obs.clone());
    let target = tape.leaf(batch.obs_next.clone());
    let (z, zq, codes) = latent(&mut tape, input);
    let pred = decode_on(&mut tape, &vars, lay, obs, zq);
    let recon = tape.mse(pred, target);
    let vq = tape.vq_loss(z, cb, &codes, cfg.beta);
    let mut terms = vec![(recon, 1.0), (vq, if straight_through { 1.0 } else { 0.0 })];

    let xexo = batch.pair_tilde.as_ref().map(|pt| {
        let input_t = tape.leaf(pt.clone());
        let (_, zq_t, _) = latent(&mut tape, input_t);
        let pred_t = decode_on(&mut tape, &vars, lay, obs, zq_t);
        let l = tape.mse(pred_t, target);
        terms.push((l, lambda));
        l
    });
    let robust = batch.labeled.as_ref().map(|(li, ly)| {
        let input_l = tape.leaf(li.clone());
        let zl = encode_on(&mut tape, &vars, lay, input_l);
        let yhat = tape.matmul(zl, vars[lay.w], true);
        let y = tape.leaf(ly.clone());
        // Element mean × d_y = mean squared norm per row.
        let l = tape.mse(yhat, y);
        let per_row = tape.weighted_sum(&[(l, cfg.d_y as f64)]);
        terms.push((per_row, lambda));
        per_row
    });
    let total = tape.weighted_sum(&terms);
    let f = |v: Var, tape: &Tape<T>| tape.scalar(v).to_f64().unwrap();
    let losses = GridLosses {
        total: f(total, &tape),
        recon: f(recon, &tape),
        vq: f(vq, &tape),
        xexo: xexo.map(|v| f(v, &tape)),
        robust: robust.map(|v| f(v, &tape)),
    };
    let grads = want_grad.then(|| {
        tape.backward(total);
        vars.iter().map(|v| tape.grad(*v)).collect()
    });
    (losses, grads)
}

/// Losses of `p` on `batch`; the objective's auxiliary term is present iff the
/// batch carries its inputs.
pub fn grid_losses(p: &GridLamParams, batch: &GridBatch<f32>, lambda: f64) -> GridLosses {
    losses_on(&p.tensors, &p.layout(), &p.config, batch, lambda, false, true).0
}

/// Relative error between the f32 tape gradient of the total loss and f64
/// central differences of the same loss, at `params` jittered by 0.1·N(0, 1)
/// so no pixel sits exactly on a ReLU kink. Evaluated on six transitions with
/// three of them labeled for the robust head.
pub fn gradient_check(
    params: &GridLamParams,
    data: &GridDataset,
    objective: GridObjective,
    lambda: f64,
    seed: u64,
) -> Result<f64, GridError> {
    if data.is_empty() {
        return Err(GridError::Config("gradient check needs a non-empty dataset".into()));
    }
    let cfg = &params.config;
    let lay = params.layout();
    let mut jitter = RngStream::new(seed, STREAM_PROBE);
    let base: Vec<Tensor<f64>> = params
        .tensors
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.data.iter_mut().for_each(|v| *v += 0.1 * jitter.gaussian() as f32);
            t.cast()
        })
        .collect();
    let p32: Vec<Tensor<f32>> = base.iter().map(|t| t.cast()).collect();
    let rows: Vec<usize> = (0..6).map(|_| jitter.below(data.len())).collect();
    let labeled: Vec<usize> = rows[..3].to_vec();
    let b32 = GridBatch::<f32>::gather(data, &rows, objective, &labeled, cfg.d_y);
    let b64 = GridBatch::<f64>::gather(data, &rows, objective, &labeled, cfg.d_y);
    let grads = losses_on(&p32, &lay, cfg, &b32, lambda, true, false).1.expect("gradients requested");
    let analytic: Vec<Tensor<f64>> = grads.iter().map(|g| g.cast()).collect();

    let h = 1e-6;
    let mut fd: Vec<Tensor<f64>> = base.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let mut ps = base.clone();
    for i in 0..base.len() {
        for j in 0..base[i].data.len() {
            ps[i].data[j] = base[i].data[j] + h;
            let up = losses_on(&ps, &lay, cfg, &b64, lambda, false, false).0.total;
            ps[i].data[j] = base[i].data[j] - h;
            let down = losses_on(&ps, &lay, cfg, &b64, lambda, false, false).0.total;
            ps[i].data[j] = base[i].data[j];
            fd[i].data[j] = (up - down) / (2.0 * h);
        }
    }
    let to_matrices = |ts: &[Tensor<f64>]| -> Result<Vec<Matrix>, GridError> {
        ts.iter().map(|t| Ok(Matrix::from_vec(t.rows, t.cols, t.data.clone())?)).collect()
    };
    Ok(crate::numerics::relative_error(&to_matrices(&analytic)?, &to_matrices(&fd)?, 1e-6))
}

/// Held-out metrics of a frozen model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    pub recon: f64,
    pub vq: f64,
    /// `mean ‖z_pre − z̃_pre‖²` across the paired exogenous draws.
    pub consistency: f64,
    pub code_disagreement: f64,
    /// Per-pixel MSE of the predicted bottom row.
    pub exo_region_mse: f64,
    /// Ridge-probe NMSE of one-hot actions from `z_pre`.
    pub action_nmse: f64,
    pub codes_used: usize,
}

fn to_matrix(t: &Tensor<f32>) -> Matrix {
    Matrix::from_vec(t.rows, t.cols, t.data.iter().map(|v| *v as f64).collect()).expect("tensor shape")
}

pub fn evaluate_grid(p: &GridLamParams, data: &GridDataset, seed: u64) -> Result<GridMetrics, GridError> {
    if data.len() < 2 {
        return Err(GridError::Config("evaluation needs at least 2 transitions".into()));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let batch = GridBatch::<f32>::gather(data, &rows, GridObjective::Xexo, &[], p.config.d_y);
    let lay = p.layout();
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &p.tensors);
    let cb = vars[lay.codebook];
    let input = tape.leaf(batch.pair.clone());
    let obs = tape.leaf(batch.obs.clone());
    let target = tape.leaf(batch.obs_next.clone());
    let z = encode_on(&mut tape, &vars, &lay, input);
    let (zq, codes) = tape.quantize(z, cb);
    let pred = decode_on(&mut tape, &vars, &lay, obs, zq);
    let recon = tape.mse(pred, target);
    let vq = tape.vq_loss(z, cb, &codes, p.config.beta);
    let input_t = tape.leaf(batch.pair_tilde.clone().expect("paired inputs"));
    let zt = encode_on(&mut tape, &vars, &lay, input_t);
    let (_, codes_t) = tape.quantize(zt, cb);

    let z_m = to_matrix(tape.value(z));
    let zt_m = to_matrix(tape.value(zt));
    let pred_m = Matrix::from_vec(data.len(), PIXELS, tape.value(pred).data.iter().map(|v| *v as f64).collect())?;
    let truth = Matrix::from_fn(data.len(), PIXELS, |i, j| data.transitions[i].obs_next[j] as f64);
    let actions = Matrix::from_fn(data.len(), 4, |i, j| if data.transitions[i].action.index() == j { 1.0 } else { 0.0 });
    let c32 = |c: &[usize]| c.iter().map(|&v| v as u32).collect::<Vec<_>>();
    let mut used = codes.clone();
    used.sort_unstable();
    used.dedup();
    Ok(GridMetrics {
        recon: tape.scalar(recon) as f64,
        vq: tape.scalar(vq) as f64,
        consistency: evaluation::consistency_loss(&z_m, &zt_m)?,
        code_disagreement: evaluation::code_disagreement(&c32(&codes), &c32(&codes_t))?,
        exo_region_mse: evaluation::exo_region_mse(&pred_m, &truth, &EXO_REGION)?,
        action_nmse: evaluation::probe_nmse(&z_m, &actions, 1e-6, &mut RngStream::new(seed, STREAM_PROBE))?,
        codes_used: used.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTrainState {
    pub params: GridLamParams,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl GridTrainState {
    pub fn init(cfg: &GridTrainConfig) -> Result<Self, GridError> {
        let params = GridLamParams::init(&cfg.model, &mut RngStream::new(cfg.seed, STREAM_INIT))?;
        let lens: Vec<usize> = params.tensors.iter().map(|t| t.data.len()).collect();
        let adam = AdamState::new(AdamConfig::with_lr(cfg.lr), params.names.clone(), &lens);
        Ok(Self { params, adam, step: 0 })
    }

    pub fn to_container(&self, cfg: &GridTrainConfig) -> Container {
        let meta = serde_json::json!({ "kind": "grid_lam", "step": self.step, "train": cfg, "param_count": self.params.param_count() });
        let mut c = Container::new(meta);
        self.params.push_tensors(&mut c, "");
        for (i, name) in self.adam.names.iter().enumerate() {
            let n = self.adam.m[i].len();
            let f = |v: &[f32]| v.iter().map(|x| *x as f64).collect();
            c.push(crate::container::Tensor::f64(&format!("adam.m.{name}"), &[n], f(&self.adam.m[i])));
            c.push(crate::container::Tensor::f64(&format!("adam.v.{name}"), &[n], f(&self.adam.v[i])));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, GridTrainConfig), GridError> {
        let bad = |m: &str| GridError::Container(ContainerError::Malformed(m.into()));
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("grid_lam") {
            return Err(bad("not a grid_lam checkpoint"));
        }
        let step = c.meta.get("step").and_then(|s| s.as_u64()).ok_or_else(|| bad("missing step"))?;
        let cfg: GridTrainConfig = serde_json::from_value(c.meta.get("train").cloned().ok_or_else(|| bad("missing train config"))?)
            .map_err(|e| GridError::Container(e.into()))?;
        let params = GridLamParams::from_tensors(&cfg.model, c, "")?;
        let mut state = Self::init(&cfg)?;
        state.params = params;
        for (i, name) in state.params.names.iter().enumerate() {
            let (_, m) = c.f64s(&format!("adam.m.{name}"))?;
            let (_, v) = c.f64s(&format!("adam.v.{name}"))?;
            if m.len() != state.adam.m[i].len() || v.len() != state.adam.v[i].len() {
                return Err(bad("optimizer state does not match parameter shapes"));
            }
            state.adam.m[i] = m.iter().map(|x| *x as f32).collect();
            state.adam.v[i] = v.iter().map(|x| *x as f32).collect();
        }
        state.adam.step = step;
        state.step = step;
        Ok((state, cfg))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHistoryPoint {
    pub step: u64,
    /// Training minibatch losses averaged since the previous point.
    pub loss: GridLosses,
    pub eval: GridMetrics,
}

#[derive(Clone, Debug)]
pub struct GridTrainOutput {
    pub state: GridTrainState,
    pub history: Vec<GridHistoryPoint>,
    /// Held-out metrics of the returned parameters.
    pub final_metrics: GridMetrics,
}

impl GridTrainOutput {
    pub fn params(&self) -> &GridLamParams {
        &self.state.params
    }

    /// True when training collapsed onto a single code.
    pub fn collapsed(&self) -> bool {
        self.final_metrics.codes_used < 2
    }

    pub fn records(&self, config_hash: &str, seed: u64) -> Vec<MetricsRecord> {
        let mut out = Vec::new();
        for h in &self.history {
            let mut push = |name: &str, v: f64| out.push(MetricsRecord::new(config_hash, seed, h.step, name, v));
            push(metric::LOSS_TOTAL, h.loss.total);
            if let Some(x) = h.loss.xexo {
                push(metric::LOSS_XEXO, x);
            }
            if let Some(r) = h.loss.robust {
                push(metric::LOSS_ROBUST, r);
            }
            push(metric::LOSS_RECON, h.eval.recon);
            push(metric::LOSS_VQ, h.eval.vq);
            push(metric::CONSISTENCY_LOSS, h.eval.consistency);
            push(metric::CODE_DISAGREEMENT, h.eval.code_disagreement);
            push(metric::EXO_REGION_MSE, h.eval.exo_region_mse);
            push(metric::ACTION_NMSE, h.eval.action_nmse);
        }
        out
    }
}

/// Train from scratch (or continue `resume`) up to `cfg.steps`, logging
/// held-out metrics on `eval` every `log_every` steps.
pub fn train_grid(
    cfg: &GridTrainConfig,
    data: &GridDataset,
    eval: &GridDataset,
    resume: Option<GridTrainState>,
) -> Result<GridTrainOutput, GridError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GridError::Config("empty training dataset".into()));
    }
    let labeled = labeled_rows(data.len(), cfg.label_fraction, cfg.seed);
    if cfg.objective == GridObjective::Robust && labeled.is_empty() {
        return Err(GridError::NoLabels);
    }
    let mut state = match resume {
        Some(s) => s,
        None => GridTrainState::init(cfg)?,
    };
    let lay = layout(&cfg.model).0;
    let base = RngStream::new(cfg.seed, STREAM_MINIBATCH);
    let n = data.len();
    let mut rows = vec![0usize; cfg.batch_size];
    let mut lab = vec![0usize; cfg.label_batch.min(labeled.len())];
    let mut history = Vec::new();
    let mut acc = GridLosses::default();
    let mut acc_n = 0u64;
    while state.step < cfg.steps {
        let mut rng = base.derive(state.step);
        rows.iter_mut().for_each(|r| *r = rng.below(n));
        lab.iter_mut().for_each(|r| *r = labeled[rng.below(labeled.len())]);
        let batch = GridBatch::gather(data, &rows, cfg.objective, &lab, cfg.model.d_y);
        let (loss, grads) = losses_on(&state.params.tensors, &lay, &cfg.model, &batch, cfg.lambda, true, true);
        let grads = grads.expect("gradients requested");
        if !loss.total.is_finite() || grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            return Err(GridError::NonFinite {
                step: state.step,
                losses: format!("{loss:?}"),
                config: serde_json::to_string(cfg).unwrap_or_default(),
            });
        }
        {
            let mut ps: Vec<&mut [f32]> = state.params.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect();
            let gs: Vec<&[f32]> = grads.iter().map(|g| g.data.as_slice()).collect();
            state.adam.update(&mut ps, &gs, cfg.grad_clip)?;
        }
        state.step += 1;

        acc.total += loss.total;
        acc.recon += loss.recon;
        acc.vq += loss.vq;
        acc.xexo = loss.xexo.map(|x| acc.xexo.unwrap_or(0.0) + x);
        acc.robust = loss.robust.map(|x| acc.robust.unwrap_or(0.0) + x);
        acc_n += 1;
        if state.step % cfg.log_every == 0 || state.step == cfg.steps {
            let k = 1.0 / acc_n as f64;
            let loss = GridLosses {
                total: acc.total * k,
                recon: acc.recon * k,
                vq: acc.vq * k,
                xexo: acc.xexo.map(|x| x * k),
                robust: acc.robust.map(|x| x * k),
            };
            history.push(GridHistoryPoint { step: state.step, loss, eval: evaluate_grid(&state.params, eval, cfg.seed)? });
            acc = GridLosses::default();
            acc_n = 0;
        }
    }
    let final_metrics = match history.last() {
        Some(h) if h.step == state.step => h.eval,
        _ => evaluate_grid(&state.params, eval, cfg.seed)?,
    };
    Ok(GridTrainOutput { state, history, final_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_lam::env::generate_grid;

    fn tiny() -> GridModelConfig {
        GridModelConfig { enc_channels: vec![1], enc_hidden: 3, d_z: 2, dec_channels: vec![1], codebook_size: 3, beta: 0.25, d_y: 4 }
    }

    #[test]
    fn tiny_model_has_about_a_hundred_parameters() {
        let p = GridLamParams::init(&tiny(), &mut RngStream::new(0, 0)).unwrap();
        assert!((80..=200).contains(&p.param_count()), "{}", p.param_count());
    }

    /// f32 tape gradients against f64 central differences of the same losses.
    #[test]
    fn tape_gradients_match_finite_differences() {
        let data = generate_grid(&GridEnvConfig { sigma: 1.0, n_steps: 200, seed: 1 }).unwrap();
        let cfg = tiny();
        for (trial, objective) in [GridObjective::Vanilla, GridObjective::Xexo, GridObjective::Robust].into_iter().cycle().take(6).enumerate() {
            let p = GridLamParams::init(&cfg, &mut RngStream::new(trial as u64, 7)).unwrap();
            let err = gradient_check(&p, &data, objective, 0.7, trial as u64).unwrap();
            assert!(err <= 1e-3, "trial {trial} ({objective:?}): relative error {err}");
        }
    }

    #[test]
    fn straight_through_delivers_the_code_adjoint_to_z_pre() {
        let data = generate_grid(&GridEnvConfig { sigma: 1.0, n_steps: 50, seed: 2 }).unwrap();
        let cfg = tiny();
        let lay = layout(&cfg).0;
        let p = GridLamParams::init(&cfg, &mut RngStream::new(3, 0)).unwrap();
        let batch = GridBatch::<f64>::gather(&data, &[0, 1, 2, 3], GridObjective::Vanilla, &[], 4);
        let tensors: Vec<Tensor<f64>> = p.tensors.iter().map(|t| t.cast()).collect();
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &tensors);
        let input = tape.leaf(batch.pair.clone());
        let obs = tape.leaf(batch.obs.clone());
        let target = tape.leaf(batch.obs_next.clone());
        let z = encode_on(&mut tape, &vars, &lay, input);
        let (zq, _) = tape.quantize(z, vars[lay.codebook]);
        let pred = decode_on(&mut tape, &vars, &lay, obs, zq);
        let l = tape.mse(pred, target);
        tape.backward(l);
        assert_eq!(tape.grad(zq), tape.grad(z));
    }

    #[test]
    fn robust_objective_without_labels_fails() {
        let data = generate_grid(&GridEnvConfig { sigma: 1.0, n_steps: 50, seed: 0 }).unwrap();
        let cfg = GridTrainConfig { model: tiny(), objective: GridObjective::Robust, label_fraction: 0.0, steps: 1, ..Default::default() };
        assert!(matches!(train_grid(&cfg, &data, &data, None), Err(GridError::NoLabels)));
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let data = generate_grid(&GridEnvConfig { sigma: 1.0, n_steps: 50, seed: 0 }).unwrap();
        let cfg = GridTrainConfig { model: tiny(), steps: 0, seed: 4, ..Default::default() };
        let out = train_grid(&cfg, &data, &data, None).unwrap();
        assert_eq!(out.state, GridTrainState::init(&cfg).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn mean_predictor_costs_a_quarter_sigma_squared_on_the_bottom_row() {
        let sigma = 2.0;
        let data = generate_grid(&GridEnvConfig { sigma, n_steps: 20_000, seed: 6 }).unwrap();
        let mse: f64 = data
            .transitions
            .iter()
            .map(|t| EXO_REGION.iter().map(|&i| (t.obs_next[i] as f64 - 0.5 * sigma).powi(2)).sum::<f64>() / 4.0)
            .sum::<f64>()
            / data.len() as f64;
        assert!((mse - 0.25 * sigma * sigma).abs() < 1e-12);
    }

    #[test]
    fn labeled_rows_are_one_percent_and_deterministic() {
        let a = labeled_rows(12_000, 0.01, 5);
        assert_eq!(a.len(), 120);
        assert_eq!(a, labeled_rows(12_000, 0.01, 5));
        assert_ne!(a, labeled_rows(12_000, 0.01, 6));
    }

    #[test]
    fn resume_continues_bit_identically() {
        let data = generate_grid(&GridEnvConfig { sigma: 1.0, n_steps: 300, seed: 0 }).unwrap();
        let eval = eval_dataset(&data.config, 32).unwrap();
        let cfg = GridTrainConfig { model: tiny(), objective: GridObjective::Robust, steps: 12, batch_size: 8, log_every: 4, eval_rows: 32, label_fraction: 0.05, ..Default::default() };
        let full = train_grid(&cfg, &data, &eval, None).unwrap();
        let half = train_grid(&GridTrainConfig { steps: 6, ..cfg.clone() }, &data, &eval, None).unwrap();
        let (state, _) = GridTrainState::from_container(&Container::read_from(half.state.to_container(&cfg).to_bytes().as_slice()).unwrap()).unwrap();
        let rest = train_grid(&cfg, &data, &eval, Some(state)).unwrap();
        assert_eq!(rest.state, full.state);
    }

    #[test]
    fn short_run_reduces_reconstruction() {
        let data = generate_grid(&GridEnvConfig { sigma: 0.0, n_steps: 600, seed: 0 }).unwrap();
        let eval = eval_dataset(&data.config, 64).unwrap();
        let model = GridModelConfig { enc_channels: vec![8], enc_hidden: 16, d_z: 4, dec_channels: vec![8, 8], ..GridModelConfig::default() };
        let cfg = GridTrainConfig { model, steps: 300, batch_size: 32, lr: 3e-3, log_every: 300, eval_rows: 64, ..Default::default() };
        let init = evaluate_grid(&GridTrainState::init(&cfg).unwrap().params, &eval, 0).unwrap();
        let out = train_grid(&cfg, &data, &eval, None).unwrap();
        assert!(out.final_metrics.recon < 0.5 * init.recon, "{} vs {}", out.final_metrics.recon, init.recon);
    }
}
