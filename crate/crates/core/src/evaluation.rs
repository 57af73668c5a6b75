//! Probes and latent-quality metrics.
//!
//! Metrics are computed from frozen models. The conditional-variance scores
//! re-render counterfactual observations through the generator's emission
//! maps, so they need the batch's [`EmissionSet`](crate::exbmdp::EmissionSet)
//! and config rather than just its stored rows.

use serde::{Deserialize, Serialize};

use crate::exbmdp::{Field, TransitionBatch};
use crate::linear_lam::LinearLamParams;
use crate::numerics::{ridge_solve, Matrix, NumericsError, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("held-out actions have zero variance")]
    ZeroVariance,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch has no paired exogenous stream")]
    MissingPairs,
    #[error("unknown metric name '{0}'")]
    UnknownMetric(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The metric registry. CSV columns and record names use exactly these keys.
pub mod metric {
    pub const LOSS_TOTAL: &str = "loss_total";
    pub const LOSS_LAM: &str = "loss_lam";
    pub const LOSS_XEXO: &str = "loss_xexo";
    pub const LOSS_ROBUST: &str = "loss_robust";
    pub const LOSS_RECON: &str = "loss_recon";
    pub const LOSS_VQ: &str = "loss_vq";
    pub const ACTION_NMSE: &str = "action_nmse";
    pub const VAR_XI_PRIME: &str = "var_xi_prime";
    pub const VAR_XI_PAIR: &str = "var_xi_pair";
    pub const CONSISTENCY_LOSS: &str = "consistency_loss";
    pub const CODE_DISAGREEMENT: &str = "code_disagreement";
    pub const EXO_REGION_MSE: &str = "exo_region_mse";
    pub const ETA_HAT: &str = "eta_hat";

    pub const ALL: &[&str] = &[
        LOSS_TOTAL,
        LOSS_LAM,
        LOSS_XEXO,
        LOSS_ROBUST,
        LOSS_RECON,
        LOSS_VQ,
        ACTION_NMSE,
        VAR_XI_PRIME,
        VAR_XI_PAIR,
        CONSISTENCY_LOSS,
        CODE_DISAGREEMENT,
        EXO_REGION_MSE,
        ETA_HAT,
    ];

    pub fn is_registered(name: &str) -> bool {
        ALL.contains(&name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(config_hash: &str, seed: u64, step: u64, metric: &str, value: f64) -> Self {
        debug_assert!(metric::is_registered(metric), "unregistered metric {metric}");
        Self { config_hash: config_hash.to_string(), seed, step, metric: metric.to_string(), value }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !metric::is_registered(&self.metric) {
            return Err(EvalError::UnknownMetric(self.metric.clone()));
        }
        if !self.value.is_finite() {
            return Err(EvalError::Numerics(NumericsError::NonFinite("metric value")));
        }
        Ok(())
    }
}

/// Linear probe `â = M z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub m: Matrix,
    pub b: Vec<f64>,
}

impl ProbeParams {
    pub fn predict(&self, z: &Matrix) -> Matrix {
        let mut out = z.matmul_nt(&self.m);
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
        }
        out
    }
}

fn col_means(x: &Matrix) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        m.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
    }
    let k = 1.0 / x.rows().max(1) as f64;
    m.iter_mut().for_each(|v| *v *= k);
    m
}

fn centered(x: &Matrix, mean: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        out.row_mut(i).iter_mut().zip(mean).for_each(|(v, m)| *v -= m);
    }
    out
}

/// Closed-form ridge probe on centered data; the intercept comes from the means.
pub fn fit_probe(z: &Matrix, a: &Matrix, lambda_ridge: f64) -> Result<ProbeParams, EvalError> {
    if z.rows() != a.rows() {
        return Err(EvalError::Shape(format!("{} latents but {} actions", z.rows(), a.rows())));
    }
    if z.rows() < z.cols() + 1 {
        return Err(EvalError::TooFewSamples { need: z.cols() + 1, got: z.rows() });
    }
    let (zm, am) = (col_means(z), col_means(a));
    let coef = ridge_solve(&centered(z, &zm), &centered(a, &am), lambda_ridge)?;
    let m = coef.transpose();
    let b = am.iter().zip(m.matvec(&zm)).map(|(a, mz)| a - mz).collect();
    Ok(ProbeParams { m, b })
}

/// `mean ‖a − â‖² / mean ‖a − ā‖²` with `ā` the mean of these (held-out) actions.
pub fn nmse(probe: &ProbeParams, z: &Matrix, a: &Matrix) -> Result<f64, EvalError> {
    let am = col_means(a);
    let denom = centered(a, &am).frobenius_sq();
    if denom <= 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(a.sub(&probe.predict(z)).frobenius_sq() / denom)
}

/// Fits on a shuffled 80% of the rows and reports NMSE on the remaining 20%.
pub fn probe_nmse(z: &Matrix, a: &Matrix, lambda_ridge: f64, rng: &mut RngStream) -> Result<f64, EvalError> {
    let n = z.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_fit = n * 4 / 5;
    let pick = |m: &Matrix, rows: &[usize]| Matrix::from_rows(&rows.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>());
    let (fit, held) = idx.split_at(n_fit);
    if held.is_empty() {
        return Err(EvalError::TooFewSamples { need: 5, got: n });
    }
    let probe = fit_probe(&pick(z, fit), &pick(a, fit), lambda_ridge)?;
    nmse(&probe, &pick(z, held), &pick(a, held))
}

/// Action NMSE of a linear LAM's latents over `n_rows` rows drawn without
/// replacement from the batch.
pub fn linear_action_nmse(
    p: &LinearLamParams,
    batch: &TransitionBatch,
    n_rows: usize,
    lambda_ridge: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut rng = RngStream::new(seed, 0xE7A1);
    let mut rows: Vec<usize> = batch.all_rows();
    rng.shuffle(&mut rows);
    rows.truncate(n_rows.min(batch.len()));
    let z = p.encode_rows(&batch.gather(Field::O, &rows), &batch.gather(Field::ONext, &rows));
    let a = batch.gather(Field::A, &rows);
    probe_nmse(&z, &a, lambda_ridge, &mut rng)
}

/// Normalized conditional variance of latents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageEstimate {
    pub value: f64,
    /// The resampled exogenous variable cannot vary (e.g. `p_switch = 0` or
    /// `n_xi = 1`); `value` is 0 by convention.
    pub degenerate: bool,
}

pub const DEFAULT_ANCHORS: usize = 512;
pub const DEFAULT_DRAWS: usize = 16;

/// What is resampled per anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    /// `ξ'` from the switching kernel, `(s, ξ, a)` fixed.
    NextOnly,
    /// `ξ` uniformly (the kernel's stationary law), then `ξ'` from the kernel.
    Both,
}

fn conditional_variance(
    p: &LinearLamParams,
    batch: &TransitionBatch,
    n_anchors: usize,
    m_draws: usize,
    seed: u64,
    mode: Resample,
) -> Result<LeakageEstimate, EvalError> {
    if m_draws < 2 || n_anchors == 0 || batch.is_empty() {
        return Err(EvalError::TooFewSamples { need: 2, got: m_draws.min(n_anchors) });
    }
    let cfg = &batch.config;
    let em = &batch.emissions;
    let degenerate = match mode {
        Resample::NextOnly => cfg.p_switch == 0.0 || cfg.n_xi < 2,
        Resample::Both => cfg.n_xi < 2 || cfg.alpha == 0.0,
    };
    if degenerate {
        return Ok(LeakageEstimate { value: 0.0, degenerate: true });
    }
    let root = RngStream::new(seed, 0xE7A2);
    let mut pick = root.derive(0);
    let d_o = batch.d_o();
    let d_z = p.d_z();
    let mut o = vec![0.0; d_o];
    let mut on = vec![0.0; d_o];
    let mut zs = Matrix::zeros(m_draws, d_z);
    let mut trace_sum = 0.0;
    let mut energy = 0.0;
    for k in 0..n_anchors {
        let i = pick.below(batch.len());
        let mut rng = root.derive(1 + k as u64);
        let xi_anchor = batch.xi[i] as usize;
        for j in 0..m_draws {
            let xi = match mode {
                Resample::NextOnly => xi_anchor,
                Resample::Both => rng.below(cfg.n_xi),
            };
            let xi_next = cfg.switch_kernel(xi, &mut rng);
            em.render_into(batch.s_row(i), xi, &mut o);
            em.render_into(batch.s_next_row(i), xi_next, &mut on);
            let z = p.idm(&o, &on).map_err(|e| EvalError::Shape(e.to_string()))?;
            zs.row_mut(j).copy_from_slice(&z);
        }
        let mean = col_means(&zs);
        trace_sum += centered(&zs, &mean).frobenius_sq() / (m_draws - 1) as f64;
        energy += zs.frobenius_sq() / m_draws as f64;
    }
    let energy = energy / n_anchors as f64;
    let value = if energy > 0.0 { trace_sum / n_anchors as f64 / energy } else { 0.0 };
    Ok(LeakageEstimate { value, degenerate: false })
}

/// `Var_{ξ'}(z | s, ξ, a) / E‖z‖²`, averaged over anchors.
pub fn var_xi_prime(
    p: &LinearLamParams,
    batch: &TransitionBatch,
    n_anchors: usize,
    m_draws: usize,
    seed: u64,
) -> Result<LeakageEstimate, EvalError> {
    conditional_variance(p, batch, n_anchors, m_draws, seed, Resample::NextOnly)
}

/// `Var_{ξ,ξ'}(z | s, a) / E‖z‖²`, averaged over anchors.
pub fn var_xi_pair(
    p: &LinearLamParams,
    batch: &TransitionBatch,
    n_anchors: usize,
    m_draws: usize,
    seed: u64,
) -> Result<LeakageEstimate, EvalError> {
    conditional_variance(p, batch, n_anchors, m_draws, seed, Resample::Both)
}

/// `mean ‖z − z̃‖²` over paired latents (one pair per row).
pub fn consistency_loss(z: &Matrix, z_tilde: &Matrix) -> Result<f64, EvalError> {
    if z.shape() != z_tilde.shape() || z.rows() == 0 {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", z.shape(), z_tilde.shape())));
    }
    Ok(z.sub(z_tilde).frobenius_sq() / z.rows() as f64)
}

/// Fraction of pairs whose discrete codes differ.
pub fn code_disagreement(codes: &[u32], codes_tilde: &[u32]) -> Result<f64, EvalError> {
    if codes.len() != codes_tilde.len() || codes.is_empty() {
        return Err(EvalError::Shape(format!("{} codes vs {}", codes.len(), codes_tilde.len())));
    }
    Ok(codes.iter().zip(codes_tilde).filter(|(a, b)| a != b).count() as f64 / codes.len() as f64)
}

/// Consistency of a linear LAM over the batch's paired stream.
pub fn linear_consistency_loss(p: &LinearLamParams, batch: &TransitionBatch, rows: &[usize]) -> Result<f64, EvalError> {
    if !batch.has_pairs {
        return Err(EvalError::MissingPairs);
    }
    let z = p.encode_rows(&batch.gather(Field::O, rows), &batch.gather(Field::ONext, rows));
    let zt = p.encode_rows(&batch.gather(Field::OTilde, rows), &batch.gather(Field::OTildeNext, rows));
    consistency_loss(&z, &zt)
}

/// Mean squared error over the pixels in `region` (flat indices into each
/// frame), frames one per row.
pub fn exo_region_mse(pred: &Matrix, truth: &Matrix, region: &[usize]) -> Result<f64, EvalError> {
    if pred.shape() != truth.shape() || pred.rows() == 0 || region.is_empty() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let mut acc = 0.0;
    for i in 0..pred.rows() {
        let (p, t) = (pred.row(i), truth.row(i));
        acc += region.iter().map(|&k| (p[k] - t[k]).powi(2)).sum::<f64>();
    }
    Ok(acc / (pred.rows() * region.len()) as f64)
}
