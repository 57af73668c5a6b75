//! Full-batch training on exact second moments.
//!
//! The reconstruction loss is quadratic in the data, so over a fixed sample it
//! depends only on the second-moment matrix of `x = [o, v, y]`, where `v` is
//! whatever the IDM sees besides `o` and `y` is the reconstruction target.
//! Training on those moments removes minibatch noise, which the verifiers need
//! to compare optima rather than optimizer trajectories.
//!
//! Moments are expressed in an orthonormal basis of the sample span, so the
//! trainer works on `r ≤ d` coordinates. Lifting a reduced solution back
//! (`A = U A_r Uᵀ`, `B = U B_r`, `C = C_r Uᵀ`, `D = D_r Vᵀ`) gives exactly the
//! same loss on the sample.

use serde::{Deserialize, Serialize};

use super::LamError;
use crate::numerics::{adam_state_for, adam_step, sym_eigen, AdamConfig, Matrix, RngStream};

/// Relative eigenvalue floor for the span basis.
const SPAN_TOL: f64 = 1e-10;

/// Second moments of `[o, v, y]` in reduced coordinates.
#[derive(Clone, Debug)]
pub struct IdmMoments {
    pub rows: usize,
    /// Basis for the span of `o` and `y` (columns).
    pub u: Matrix,
    /// Basis for the span of `v` (columns).
    pub v_basis: Matrix,
    pub soo: Matrix,
    pub sov: Matrix,
    pub svv: Matrix,
    pub soy: Matrix,
    pub svy: Matrix,
    pub syy: Matrix,
}

/// Running sums in the original coordinates.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    rows: usize,
    soo: Matrix,
    sov: Matrix,
    svv: Matrix,
    soy: Matrix,
    svy: Matrix,
    syy: Matrix,
}

impl MomentAccumulator {
    pub fn new(d_o: usize, d_v: usize) -> Self {
        Self {
            rows: 0,
            soo: Matrix::zeros(d_o, d_o),
            sov: Matrix::zeros(d_o, d_v),
            svv: Matrix::zeros(d_v, d_v),
            soy: Matrix::zeros(d_o, d_o),
            svy: Matrix::zeros(d_v, d_o),
            syy: Matrix::zeros(d_o, d_o),
        }
    }

    /// Adds a block of samples (one per row).
    pub fn add(&mut self, o: &Matrix, v: &Matrix, y: &Matrix) {
        use crate::numerics::{gemm_into, Trans};
        let acc = |a: &Matrix, b: &Matrix, out: &mut Matrix| gemm_into(1.0, a, Trans::Yes, b, Trans::No, 1.0, out);
        acc(o, o, &mut self.soo);
        acc(o, v, &mut self.sov);
        acc(v, v, &mut self.svv);
        acc(o, y, &mut self.soy);
        acc(v, y, &mut self.svy);
        acc(y, y, &mut self.syy);
        self.rows += o.rows();
    }

    pub fn finish(self) -> Result<IdmMoments, LamError> {
        if self.rows == 0 {
            return Err(LamError::Dimension("no samples".into()));
        }
        let k = 1.0 / self.rows as f64;
        let scale = |m: &Matrix| m.scaled(k);
        let (soo, sov, svv, soy, svy, syy) =
            (scale(&self.soo), scale(&self.sov), scale(&self.svv), scale(&self.soy), scale(&self.svy), scale(&self.syy));
        let u = span_basis(&soo.add(&syy))?;
        let vb = span_basis(&svv)?;
        let proj = |l: &Matrix, m: &Matrix, r: &Matrix| l.matmul_tn(m).matmul(r);
        Ok(IdmMoments {
            rows: self.rows,
            soo: proj(&u, &soo, &u),
            sov: proj(&u, &sov, &vb),
            svv: proj(&vb, &svv, &vb),
            soy: proj(&u, &soy, &u),
            svy: proj(&vb, &svy, &u),
            syy: proj(&u, &syy, &u),
            u,
            v_basis: vb,
        })
    }
}

fn span_basis(m: &Matrix) -> Result<Matrix, LamError> {
    let (vals, vecs) = sym_eigen(m)?;
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let r = vals.iter().take_while(|&&l| l > top * SPAN_TOL && l > 0.0).count();
    Ok(vecs.col_block(0, r.max(1)))
}

impl IdmMoments {
    pub fn r_o(&self) -> usize {
        self.u.cols()
    }

    pub fn r_v(&self) -> usize {
        self.v_basis.cols()
    }

    /// Loss of `y ≈ M o + N v` with `M = A + B C`, `N = B D` (reduced coordinates).
    fn loss_and_grads(&self, a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix, want: bool) -> (f64, Option<[Matrix; 4]>) {
        let mut m = a.clone();
        crate::numerics::gemm_into(1.0, b, crate::numerics::Trans::No, c, crate::numerics::Trans::No, 1.0, &mut m);
        let n = b.matmul(d);
        // P_o = M Σ_oo + N Σ_vo,  P_v = M Σ_ov + N Σ_vv
        let mut p_o = m.matmul(&self.soo);
        crate::numerics::gemm_into(1.0, &n, crate::numerics::Trans::No, &self.sov, crate::numerics::Trans::Yes, 1.0, &mut p_o);
        let mut p_v = m.matmul(&self.sov);
        crate::numerics::gemm_into(1.0, &n, crate::numerics::Trans::No, &self.svv, crate::numerics::Trans::No, 1.0, &mut p_v);
        let mut loss = self.syy.trace();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                // tr(M Σ_oy) = Σ M_ij Σ_oy[j,i]; tr(P_o Mᵀ) = Σ P_o_ij M_ij
                loss += m[(i, j)] * (p_o[(i, j)] - 2.0 * self.soy[(j, i)]);
            }
            for j in 0..n.cols() {
                loss += n[(i, j)] * (p_v[(i, j)] - 2.0 * self.svy[(j, i)]);
            }
        }
        if !want {
            return (loss, None);
        }
        // dL/dM = 2(P_o − Σ_yo), dL/dN = 2(P_v − Σ_yv)
        let gm = Matrix::from_fn(m.rows(), m.cols(), |i, j| 2.0 * (p_o[(i, j)] - self.soy[(j, i)]));
        let gn = Matrix::from_fn(n.rows(), n.cols(), |i, j| 2.0 * (p_v[(i, j)] - self.svy[(j, i)]));
        let mut db = gm.matmul_nt(c);
        crate::numerics::gemm_into(1.0, &gn, crate::numerics::Trans::No, d, crate::numerics::Trans::Yes, 1.0, &mut db);
        let dc = b.matmul_tn(&gm);
        let dd = b.matmul_tn(&gn);
        (loss, Some([gm, db, dc, dd]))
    }

    /// Loss of a model given in original coordinates.
    pub fn loss_of(&self, a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> f64 {
        let (a, b, c, d) = self.reduce(a, b, c, d);
        self.loss_and_grads(&a, &b, &c, &d, false).0
    }

    fn reduce(&self, a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> (Matrix, Matrix, Matrix, Matrix) {
        let u = &self.u;
        (u.matmul_tn(&a.matmul(u)), u.matmul_tn(b), c.matmul(u), d.matmul(&self.v_basis))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentTrainConfig {
    pub d_z: usize,
    pub lr: f64,
    pub max_steps: u64,
    /// Stop once the loss improved by less than `rel_tol` (relative) over this many steps.
    pub window: u64,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MomentTrainConfig {
    fn default() -> Self {
        Self { d_z: 8, lr: 1e-3, max_steps: 50_000, window: 500, rel_tol: 1e-6, restarts: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentFit {
    /// Best final loss over restarts.
    pub loss: f64,
    pub restart_losses: Vec<f64>,
    pub restart_steps: Vec<u64>,
    /// `max − min` of the restart losses.
    pub spread: f64,
}

/// Adam on the exact moment loss with a plateau stopping rule, best of
/// `cfg.restarts` random initializations.
pub fn train_moment_lam(mom: &IdmMoments, cfg: &MomentTrainConfig) -> Result<MomentFit, LamError> {
    if cfg.restarts == 0 || cfg.window == 0 {
        return Err(LamError::Config("restarts and window must be positive".into()));
    }
    let (r, rv, dz) = (mom.r_o(), mom.r_v(), cfg.d_z);
    let mut losses = Vec::new();
    let mut steps = Vec::new();
    for k in 0..cfg.restarts {
        let mut rng = RngStream::new(cfg.seed, 0x3_0000 + k as u64);
        let mut g = |rows: usize, cols: usize, fan: usize| {
            Matrix::from_vec(rows, cols, rng.gaussian_vec(rows * cols, 1.0 / (fan as f64).sqrt())).expect("shape")
        };
        let mut params = vec![g(r, r, r), g(r, dz, dz), g(dz, r, r), g(dz, rv, rv)];
        let mut adam = adam_state_for(AdamConfig::with_lr(cfg.lr), &["A", "B", "C", "D"], &params);
        let mut trace = Vec::with_capacity(cfg.max_steps as usize + 1);
        let mut step = 0;
        loop {
            let (loss, grads) = mom.loss_and_grads(&params[0], &params[1], &params[2], &params[3], true);
            if !loss.is_finite() {
                return Err(LamError::NonFinite { step, config: serde_json::to_string(cfg).unwrap_or_default() });
            }
            trace.push(loss);
            let w = cfg.window as usize;
            if trace.len() > w {
                let prev = trace[trace.len() - 1 - w];
                if prev - loss < cfg.rel_tol * loss.abs().max(1e-300) {
                    break;
                }
            }
            if step >= cfg.max_steps {
                break;
            }
            adam_step(&mut params, &grads.unwrap(), &mut adam, None)?;
            step += 1;
        }
        losses.push(*trace.last().unwrap());
        steps.push(step);
    }
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let worst = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MomentFit { loss: best, spread: worst - best, restart_losses: losses, restart_steps: steps })
}

/// Global minimum over all `(A, B, C, D)` with latent width `d_z`.
///
/// `A + B C` is unconstrained, so the optimum removes everything linearly
/// predictable from `o` and then fits a rank-`d_z` map from the `o`-residual
/// of `v` to the `o`-residual of `y` (reduced-rank regression).
pub fn closed_form_optimum(mom: &IdmMoments, d_z: usize) -> Result<f64, LamError> {
    let soo_pinv = pinv_sym(&mom.soo)?;
    let syo = mom.soy.transpose();
    let svo = mom.sov.transpose();
    let yy = mom.syy.sub(&syo.matmul(&soo_pinv).matmul(&mom.soy));
    let vv = mom.svv.sub(&svo.matmul(&soo_pinv).matmul(&mom.sov));
    let yv = mom.svy.transpose().sub(&syo.matmul(&soo_pinv).matmul(&mom.sov));
    let vv_pinv = pinv_sym(&vv)?;
    let t = yv.matmul(&vv_pinv).matmul_nt(&yv);
    let t = t.add(&t.transpose()).scaled(0.5);
    let (vals, _) = sym_eigen(&t)?;
    let captured: f64 = vals.iter().take(d_z).map(|v| v.max(0.0)).sum();
    Ok(yy.trace() - captured)
}

fn pinv_sym(m: &Matrix) -> Result<Matrix, LamError> {
    let (vals, vecs) = sym_eigen(m)?;
    let top = vals.first().copied().unwrap_or(0.0).abs();
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &l) in vals.iter().enumerate() {
        if l > top * 1e-10 && l > 0.0 {
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += vecs[(i, k)] * vecs[(j, k)] / l;
                }
            }
        }
    }
    Ok(out)
}

/// Moment form of `E‖u − B D ũ‖²` given `Σ_uu`, `Σ_uũ`, `Σ_ũũ`.
pub fn pair_loss(s_uu: &Matrix, s_ut: &Matrix, s_tt: &Matrix, n: &Matrix) -> f64 {
    let nt = n.matmul(s_tt);
    let mut l = s_uu.trace();
    for i in 0..n.rows() {
        for j in 0..n.cols() {
            l += n[(i, j)] * (nt[(i, j)] - 2.0 * s_ut[(i, j)]);
        }
    }
    l
}

#[derive(Clone, Debug)]
pub struct PairFit {
    pub b: Matrix,
    pub d: Matrix,
    /// `(step, B D)` at each requested checkpoint.
    pub checkpoints: Vec<(u64, Matrix)>,
    pub loss: f64,
}

/// Trains `B, D` to minimize `E‖u − B D ũ‖²` (the cross-exogenous loss with
/// `A = I`, `C = −D`) by full-batch Adam on the moments.
pub fn fit_pair_map(
    s_uu: &Matrix,
    s_ut: &Matrix,
    s_tt: &Matrix,
    d_z: usize,
    lr: f64,
    steps: u64,
    checkpoint_steps: &[u64],
    seed: u64,
) -> Result<PairFit, LamError> {
    let d = s_ut.rows();
    if s_ut.cols() != d || s_uu.shape() != (d, d) || s_tt.shape() != (d, d) {
        return Err(LamError::Dimension("pair moments must be square and equal-sized".into()));
    }
    let mut rng = RngStream::new(seed, 0x3_1000);
    let mut params = vec![
        Matrix::from_vec(d, d_z, rng.gaussian_vec(d * d_z, 1.0 / (d_z as f64).sqrt()))?,
        Matrix::from_vec(d_z, d, rng.gaussian_vec(d * d_z, 1.0 / (d as f64).sqrt()))?,
    ];
    let mut adam = adam_state_for(AdamConfig::with_lr(lr), &["B", "D"], &params);
    let mut checkpoints = Vec::new();
    for step in 0..=steps {
        let n = params[0].matmul(&params[1]);
        if checkpoint_steps.contains(&step) {
            checkpoints.push((step, n.clone()));
        }
        if step == steps {
            break;
        }
        // dL/dN = 2(N Σ_ũũ − Σ_uũ)
        let mut gn = n.matmul(s_tt);
        gn.axpy(-1.0, s_ut);
        gn.scale(2.0);
        let db = gn.matmul_nt(&params[1]);
        let dd = params[0].matmul_tn(&gn);
        adam_step(&mut params, &[db, dd], &mut adam, None)?;
    }
    let n = params[0].matmul(&params[1]);
    let loss = pair_loss(s_uu, s_ut, s_tt, &n);
    let d_mat = params.pop().unwrap();
    let b_mat = params.pop().unwrap();
    Ok(PairFit { b: b_mat, d: d_mat, checkpoints, loss })
}
