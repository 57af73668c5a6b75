//! Synthetic linear Ex-BMDP data.
//!
//! The endogenous state follows `s' = s + a` with `a ~ N(0, I)`. The exogenous
//! index `ξ` switches with probability `p_switch` to a uniformly chosen other
//! state. Observations are `o = H_ξ s` with `H_ξ = H0 + α R_ξ`.
//!
//! A second exogenous chain `ξ̃` re-renders the same `(s, s')` under a state
//! that differs from `ξ` at every step; it feeds the cross-exogenous objective
//! and the consistency metrics.
//!
//! Rows only store the latent quantities; observations and the
//! `o' − o = q + ε` decomposition are rendered on demand through the shared
//! [`EmissionSet`].

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerError, Tensor};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("exogenous index {index} out of range (n_xi = {n_xi})")]
    IndexOutOfRange { index: usize, n_xi: usize },
    #[error("state has length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearEnvConfig {
    #[serde(default = "d8")]
    pub d_s: usize,
    #[serde(default = "d8")]
    pub d_a: usize,
    #[serde(default = "d128")]
    pub d_o: usize,
    #[serde(default = "d8")]
    pub n_xi: usize,
    #[serde(default)]
    pub p_switch: f64,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "d8000")]
    pub n_traj: usize,
    #[serde(default = "d16")]
    pub traj_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d8() -> usize {
    8
}
fn d16() -> usize {
    16
}
fn d128() -> usize {
    128
}
fn d8000() -> usize {
    8000
}
fn half() -> f64 {
    0.5
}

impl Default for LinearEnvConfig {
    fn default() -> Self {
        Self { d_s: 8, d_a: 8, d_o: 128, n_xi: 8, p_switch: 0.0, alpha: 0.5, n_traj: 8000, traj_len: 16, seed: 0 }
    }
}

impl LinearEnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |field, reason: String| Err(EnvError::Config { field, reason });
        if self.d_s == 0 || self.d_o == 0 {
            return bad("d_s", "dimensions must be positive".into());
        }
        if self.d_a != self.d_s {
            return bad("d_a", format!("d_a ({}) must equal d_s ({}) for s' = s + a", self.d_a, self.d_s));
        }
        if self.n_xi == 0 {
            return bad("n_xi", "at least one exogenous state is required".into());
        }
        if !(0.0..=1.0).contains(&self.p_switch) {
            return bad("p_switch", format!("{} is not a probability", self.p_switch));
        }
        if self.p_switch > 0.0 && self.n_xi == 1 {
            return bad("p_switch", "p_switch > 0 needs n_xi >= 2 (no other state to switch to)".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha", format!("{} must be a finite nonnegative number", self.alpha));
        }
        if self.n_traj == 0 {
            return bad("n_traj", "need at least one trajectory".into());
        }
        if self.traj_len < 2 {
            return bad("traj_len", "trajectories need at least two states".into());
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.n_traj * (self.traj_len - 1)
    }

    /// Draw `ξ'` from the switching kernel. Always consumes one uniform and one
    /// index draw so that runs differing only in `p_switch` stay aligned.
    pub fn switch_kernel(&self, xi: usize, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        if self.n_xi < 2 {
            return xi;
        }
        let j = rng.below(self.n_xi - 1);
        if u < self.p_switch {
            if j >= xi {
                j + 1
            } else {
                j
            }
        } else {
            xi
        }
    }
}

/// `H_ξ = H0 + α R_ξ` for every exogenous index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionSet {
    pub alpha: f64,
    pub h0: Matrix,
    pub r: Vec<Matrix>,
    h: Vec<Matrix>,
}

impl EmissionSet {
    pub fn new(h0: Matrix, r: Vec<Matrix>, alpha: f64) -> Self {
        let h = r
            .iter()
            .map(|ri| {
                let mut hi = h0.clone();
                hi.axpy(alpha, ri);
                hi
            })
            .collect();
        Self { alpha, h0, r, h }
    }

    pub fn n_xi(&self) -> usize {
        self.r.len()
    }

    pub fn d_o(&self) -> usize {
        self.h0.rows()
    }

    pub fn d_s(&self) -> usize {
        self.h0.cols()
    }

    pub fn h(&self, xi: usize) -> &Matrix {
        &self.h[xi]
    }

    pub fn render(&self, s: &[f64], xi: usize) -> Result<Vec<f64>, EnvError> {
        if xi >= self.n_xi() {
            return Err(EnvError::IndexOutOfRange { index: xi, n_xi: self.n_xi() });
        }
        if s.len() != self.d_s() {
            return Err(EnvError::Dimension { got: s.len(), expected: self.d_s() });
        }
        let mut out = vec![0.0; self.d_o()];
        self.render_into(s, xi, &mut out);
        Ok(out)
    }

    /// Unchecked `out = H_ξ s`.
    #[inline]
    pub fn render_into(&self, s: &[f64], xi: usize, out: &mut [f64]) {
        let h = &self.h[xi];
        let ds = s.len();
        for (o, row) in out.iter_mut().zip(h.as_slice().chunks_exact(ds)) {
            let mut acc = 0.0;
            for j in 0..ds {
                acc += row[j] * s[j];
            }
            *o = acc;
        }
    }
}

/// H0 and every R_ξ get i.i.d. `N(0, 1/d_s)` entries.
pub fn build_emissions(cfg: &LinearEnvConfig, rng: &RngStream) -> Result<EmissionSet, EnvError> {
    if cfg.n_xi == 0 {
        return Err(EnvError::Config { field: "n_xi", reason: "at least one exogenous state is required".into() });
    }
    let std = 1.0 / (cfg.d_s as f64).sqrt();
    let mut r0 = rng.derive(0xE4);
    let h0 = Matrix::from_vec(cfg.d_o, cfg.d_s, r0.gaussian_vec(cfg.d_o * cfg.d_s, std)).expect("shape");
    let r = (0..cfg.n_xi)
        .map(|i| {
            let mut ri = rng.derive(0xE5_0000 + i as u64);
            Matrix::from_vec(cfg.d_o, cfg.d_s, ri.gaussian_vec(cfg.d_o * cfg.d_s, std)).expect("shape")
        })
        .collect();
    Ok(EmissionSet::new(h0, r, cfg.alpha))
}

/// Which rendered quantity to gather for a set of rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    S,
    A,
    SNext,
    O,
    ONext,
    OTilde,
    OTildeNext,
    /// `q = H_ξ a`
    Q,
    /// `ε = (H_ξ' − H_ξ) s'`
    Eps,
    QTilde,
    EpsTilde,
}

/// Generated transitions. Row `i` holds `(s, a, s', ξ, ξ', ξ̃, ξ̃')`.
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    pub config: LinearEnvConfig,
    pub emissions: Arc<EmissionSet>,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub xi: Vec<u32>,
    pub xi_next: Vec<u32>,
    pub xi_tilde: Vec<u32>,
    pub xi_tilde_next: Vec<u32>,
    pub has_pairs: bool,
}

pub const STREAM_EMISSIONS: u64 = 1;
pub const STREAM_TRAJECTORIES: u64 = 2;

/// Environment RNG root for a config: emissions and trajectories hang off it.
pub fn env_rng(cfg: &LinearEnvConfig) -> RngStream {
    RngStream::new(cfg.seed, 0x1E_0000)
}

/// Emissions and transitions for a config, from its own seed.
pub fn generate_from_seed(cfg: &LinearEnvConfig) -> Result<TransitionBatch, EnvError> {
    cfg.validate()?;
    let root = env_rng(cfg);
    let em = build_emissions(cfg, &root.derive(STREAM_EMISSIONS))?;
    generate(cfg, Arc::new(em), &root.derive(STREAM_TRAJECTORIES))
}

pub fn generate(cfg: &LinearEnvConfig, em: Arc<EmissionSet>, rng: &RngStream) -> Result<TransitionBatch, EnvError> {
    cfg.validate()?;
    if em.n_xi() != cfg.n_xi || em.d_s() != cfg.d_s || em.d_o() != cfg.d_o {
        return Err(EnvError::Config { field: "emissions", reason: "emission set does not match config dimensions".into() });
    }
    let n = cfg.rows();
    let ds = cfg.d_s;
    let mut b = TransitionBatch {
        config: cfg.clone(),
        emissions: em,
        s: Vec::with_capacity(n * ds),
        a: Vec::with_capacity(n * ds),
        s_next: Vec::with_capacity(n * ds),
        xi: Vec::with_capacity(n),
        xi_next: Vec::with_capacity(n),
        xi_tilde: Vec::with_capacity(n),
        xi_tilde_next: Vec::with_capacity(n),
        has_pairs: cfg.n_xi >= 2,
    };
    let k = cfg.n_xi;
    for traj in 0..cfg.n_traj {
        let t = traj as u64;
        let mut endo = rng.derive(t << 2);
        let mut exo = rng.derive((t << 2) | 1);
        let mut pair = rng.derive((t << 2) | 2);
        let mut s = endo.gaussian_vec(ds, 1.0);
        let mut xi = exo.below(k);
        let mut xt = if k >= 2 {
            let j = pair.below(k - 1);
            if j >= xi {
                j + 1
            } else {
                j
            }
        } else {
            xi
        };
        for _ in 0..cfg.traj_len - 1 {
            let a = endo.gaussian_vec(ds, 1.0);
            let s_next: Vec<f64> = s.iter().zip(&a).map(|(x, y)| x + y).collect();
            let xi_next = cfg.switch_kernel(xi, &mut exo);
            let mut xt_next = cfg.switch_kernel(xt, &mut pair);
            if k >= 2 && xt_next == xi_next {
                let j = pair.below(k - 1);
                xt_next = if j >= xi_next { j + 1 } else { j };
            }
            b.s.extend_from_slice(&s);
            b.a.extend_from_slice(&a);
            b.s_next.extend_from_slice(&s_next);
            b.xi.push(xi as u32);
            b.xi_next.push(xi_next as u32);
            b.xi_tilde.push(xt as u32);
            b.xi_tilde_next.push(xt_next as u32);
            s = s_next;
            xi = xi_next;
            xt = xt_next;
        }
    }
    Ok(b)
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn d_s(&self) -> usize {
        self.config.d_s
    }

    pub fn d_o(&self) -> usize {
        self.config.d_o
    }

    pub fn s_row(&self, i: usize) -> &[f64] {
        &self.s[i * self.d_s()..(i + 1) * self.d_s()]
    }

    pub fn a_row(&self, i: usize) -> &[f64] {
        &self.a[i * self.d_s()..(i + 1) * self.d_s()]
    }

    pub fn s_next_row(&self, i: usize) -> &[f64] {
        &self.s_next[i * self.d_s()..(i + 1) * self.d_s()]
    }

    pub fn switched(&self, i: usize) -> bool {
        self.xi[i] != self.xi_next[i]
    }

    /// Width of a gathered field.
    pub fn field_dim(&self, f: Field) -> usize {
        match f {
            Field::S | Field::A | Field::SNext => self.d_s(),
            _ => self.d_o(),
        }
    }

    /// Write one row of `field` into `out`.
    pub fn field_into(&self, field: Field, i: usize, out: &mut [f64]) {
        let em = &self.emissions;
        match field {
            Field::S => out.copy_from_slice(self.s_row(i)),
            Field::A => out.copy_from_slice(self.a_row(i)),
            Field::SNext => out.copy_from_slice(self.s_next_row(i)),
            Field::O => em.render_into(self.s_row(i), self.xi[i] as usize, out),
            Field::ONext => em.render_into(self.s_next_row(i), self.xi_next[i] as usize, out),
            Field::OTilde => em.render_into(self.s_row(i), self.xi_tilde[i] as usize, out),
            Field::OTildeNext => em.render_into(self.s_next_row(i), self.xi_tilde_next[i] as usize, out),
            Field::Q => em.render_into(self.a_row(i), self.xi[i] as usize, out),
            Field::QTilde => em.render_into(self.a_row(i), self.xi_tilde[i] as usize, out),
            Field::Eps | Field::EpsTilde => {
                let (from, to) = if field == Field::Eps {
                    (self.xi[i], self.xi_next[i])
                } else {
                    (self.xi_tilde[i], self.xi_tilde_next[i])
                };
                em.render_into(self.s_next_row(i), to as usize, out);
                if from != to {
                    let mut base = vec![0.0; out.len()];
                    em.render_into(self.s_next_row(i), from as usize, &mut base);
                    out.iter_mut().zip(&base).for_each(|(o, b)| *o -= b);
                } else {
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
        }
    }

    pub fn field(&self, field: Field, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.field_dim(field)];
        self.field_into(field, i, &mut out);
        out
    }

    /// Rows of `field` for the given indices, one sample per matrix row.
    pub fn gather(&self, field: Field, rows: &[usize]) -> Matrix {
        let d = self.field_dim(field);
        let mut m = Matrix::zeros(rows.len(), d);
        for (k, &i) in rows.iter().enumerate() {
            self.field_into(field, i, m.row_mut(k));
        }
        m
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Mean `‖q‖²`, mean `‖ε‖²` and the empirical switch rate.
    pub fn summary(&self) -> BatchSummary {
        let n = self.len().max(1) as f64;
        let mut q = vec![0.0; self.d_o()];
        let mut e = vec![0.0; self.d_o()];
        let (mut qe, mut ee, mut sw) = (0.0, 0.0, 0usize);
        for i in 0..self.len() {
            self.field_into(Field::Q, i, &mut q);
            self.field_into(Field::Eps, i, &mut e);
            qe += q.iter().map(|x| x * x).sum::<f64>();
            ee += e.iter().map(|x| x * x).sum::<f64>();
            sw += usize::from(self.switched(i));
        }
        BatchSummary { rows: self.len(), mean_q_energy: qe / n, mean_eps_energy: ee / n, switch_rate: sw as f64 / n }
    }

    pub fn to_container(&self) -> Container {
        let n = self.len();
        let ds = self.d_s();
        let em = &self.emissions;
        let meta = serde_json::json!({ "kind": "linear_dataset", "env": self.config, "has_pairs": self.has_pairs });
        let mut c = Container::new(meta);
        c.push(Tensor::f64("H0", &[em.d_o(), ds], em.h0.as_slice().to_vec()));
        let r: Vec<f64> = em.r.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        c.push(Tensor::f64("R", &[em.n_xi(), em.d_o(), ds], r));
        c.push(Tensor::f64("s", &[n, ds], self.s.clone()));
        c.push(Tensor::f64("a", &[n, ds], self.a.clone()));
        c.push(Tensor::f64("s_next", &[n, ds], self.s_next.clone()));
        c.push(Tensor::u32("xi", &[n], self.xi.clone()));
        c.push(Tensor::u32("xi_next", &[n], self.xi_next.clone()));
        c.push(Tensor::u32("xi_tilde", &[n], self.xi_tilde.clone()));
        c.push(Tensor::u32("xi_tilde_next", &[n], self.xi_tilde_next.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, EnvError> {
        let config: LinearEnvConfig = serde_json::from_value(c.meta["env"].clone()).map_err(ContainerError::from)?;
        config.validate()?;
        let (_, h0) = c.f64s("H0")?;
        let (_, r) = c.f64s("R")?;
        let block = config.d_o * config.d_s;
        if h0.len() != block || r.len() != block * config.n_xi {
            return Err(ContainerError::Malformed("emission tensors do not match config".into()).into());
        }
        let h0 = Matrix::from_vec(config.d_o, config.d_s, h0.to_vec()).expect("checked");
        let r = r.chunks_exact(block).map(|ch| Matrix::from_vec(config.d_o, config.d_s, ch.to_vec()).expect("checked")).collect();
        let em = EmissionSet::new(h0, r, config.alpha);
        let get = |name: &str| c.f64s(name).map(|(_, v)| v.to_vec());
        let geti = |name: &str| c.u32s(name).map(|(_, v)| v.to_vec());
        Ok(Self {
            has_pairs: c.meta["has_pairs"].as_bool().unwrap_or(config.n_xi >= 2),
            emissions: Arc::new(em),
            s: get("s")?,
            a: get("a")?,
            s_next: get("s_next")?,
            xi: geti("xi")?,
            xi_next: geti("xi_next")?,
            xi_tilde: geti("xi_tilde")?,
            xi_tilde_next: geti("xi_tilde_next")?,
            config,
        })
    }

    /// Inspection CSV with every rendered field, one transition per line.
    pub fn write_csv(&self, mut w: impl Write, max_rows: Option<usize>) -> std::io::Result<()> {
        let fields = [
            ("s", Field::S),
            ("a", Field::A),
            ("s_next", Field::SNext),
            ("o", Field::O),
            ("o_next", Field::ONext),
            ("o_tilde", Field::OTilde),
            ("o_tilde_next", Field::OTildeNext),
            ("q", Field::Q),
            ("eps", Field::Eps),
        ];
        let mut header = vec!["row".to_string(), "xi".into(), "xi_next".into(), "xi_tilde".into(), "xi_tilde_next".into()];
        for (name, f) in fields {
            for j in 0..self.field_dim(f) {
                header.push(format!("{name}_{j}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        let n = max_rows.map_or(self.len(), |m| m.min(self.len()));
        for i in 0..n {
            let mut line = format!("{i},{},{},{},{}", self.xi[i], self.xi_next[i], self.xi_tilde[i], self.xi_tilde_next[i]);
            for (_, f) in fields {
                for v in self.field(f, i) {
                    line.push(',');
                    line.push_str(&format!("{v:.17e}"));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub rows: usize,
    pub mean_q_energy: f64,
    pub mean_eps_energy: f64,
    pub switch_rate: f64,
}

/// Empirical form of the exogenous-energy decomposition and its sensitivity bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEnergyReport {
    /// mean ‖ε‖² over all rows
    pub lhs: f64,
    /// fraction of rows with ξ' ≠ ξ
    pub p_hat: f64,
    /// mean ‖ε‖² over switching rows (0 if none)
    pub cond: f64,
    /// max over switching rows and all exogenous pairs of ‖h(s', ξ̂) − h(s', ξ)‖²
    pub delta_h_hat: f64,
    /// |lhs − p_hat·cond| / max(lhs, tiny)
    pub identity_rel_error: f64,
    pub bound_holds: bool,
    pub rows: usize,
}

pub fn noise_energy_report(batch: &TransitionBatch) -> NoiseEnergyReport {
    let n = batch.len();
    let em = &batch.emissions;
    let k = em.n_xi();
    // ‖(H_j − H_i) s‖² = sᵀ G_ij s with G_ij = (H_j − H_i)ᵀ(H_j − H_i)
    let mut grams = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let diff = em.h(j).sub(em.h(i));
            grams.push(diff.matmul_tn(&diff));
        }
    }
    let mut eps = vec![0.0; batch.d_o()];
    let (mut total, mut switch_total, mut switches, mut delta) = (0.0, 0.0, 0usize, 0.0f64);
    for i in 0..n {
        batch.field_into(Field::Eps, i, &mut eps);
        let e2: f64 = eps.iter().map(|x| x * x).sum();
        total += e2;
        if batch.switched(i) {
            switches += 1;
            switch_total += e2;
            let s = batch.s_next_row(i);
            for g in &grams {
                let gs = g.matvec(s);
                let v: f64 = gs.iter().zip(s).map(|(a, b)| a * b).sum();
                delta = delta.max(v);
            }
        }
    }
    let lhs = if n > 0 { total / n as f64 } else { 0.0 };
    let p_hat = if n > 0 { switches as f64 / n as f64 } else { 0.0 };
    let cond = if switches > 0 { switch_total / switches as f64 } else { 0.0 };
    let identity_rel_error = (lhs - p_hat * cond).abs() / lhs.max(f64::MIN_POSITIVE);
    // The quadratic-form route and the rendered route round differently.
    let bound_holds = lhs <= p_hat * delta * (1.0 + 1e-12) + 1e-300;
    NoiseEnergyReport { lhs, p_hat, cond, delta_h_hat: delta, identity_rel_error, bound_holds, rows: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: f64, alpha: f64, n_xi: usize, seed: u64) -> LinearEnvConfig {
        LinearEnvConfig { d_o: 32, n_traj: 200, p_switch: p, alpha, n_xi, seed, ..Default::default() }
    }

    #[test]
    fn alpha_zero_collapses_emissions() {
        let cfg = small(0.3, 0.0, 4, 1);
        let em = build_emissions(&cfg, &RngStream::new(1, 1)).unwrap();
        for i in 0..4 {
            assert_eq!(em.h(i), &em.h0);
        }
    }

    #[test]
    fn single_exogenous_state_has_no_noise() {
        let cfg = small(0.0, 0.7, 1, 2);
        let b = generate_from_seed(&cfg).unwrap();
        assert_eq!(b.summary().mean_eps_energy, 0.0);
        assert!(!b.has_pairs);
    }

    #[test]
    fn emissions_are_reproducible() {
        let cfg = LinearEnvConfig { n_xi: 8, seed: 3, ..Default::default() };
        let root = env_rng(&cfg).derive(STREAM_EMISSIONS);
        let a = build_emissions(&cfg, &root).unwrap();
        let b = build_emissions(&cfg, &root).unwrap();
        assert_eq!(a, b);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(a.r[i], a.r[j]);
            }
        }
    }

    #[test]
    fn no_switching_means_no_noise() {
        let b = generate_from_seed(&small(0.0, 0.5, 8, 4)).unwrap();
        for i in 0..b.len() {
            assert_eq!(b.xi[i], b.xi_next[i]);
            assert!(b.field(Field::Eps, i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn switch_rate_matches_p() {
        let cfg = LinearEnvConfig { p_switch: 0.3, d_o: 16, ..Default::default() };
        let b = generate_from_seed(&cfg).unwrap();
        let n = b.len() as f64;
        let rate = b.summary().switch_rate;
        let se = (0.3f64 * 0.7 / n).sqrt();
        assert!((rate - 0.3).abs() <= 3.0 * se, "rate {rate}");
    }

    #[test]
    fn additive_identity_holds_per_row() {
        let b = generate_from_seed(&small(0.4, 0.8, 8, 5)).unwrap();
        for i in 0..b.len() {
            let o = b.field(Field::O, i);
            let on = b.field(Field::ONext, i);
            let q = b.field(Field::Q, i);
            let e = b.field(Field::Eps, i);
            let scale = on.iter().map(|x| x.abs()).fold(1.0, f64::max);
            for j in 0..o.len() {
                assert!((on[j] - o[j] - q[j] - e[j]).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn paired_stream_shares_state_and_differs_in_xi() {
        let b = generate_from_seed(&small(0.5, 0.5, 3, 6)).unwrap();
        for i in 0..b.len() {
            assert_ne!(b.xi[i], b.xi_tilde[i]);
            assert_ne!(b.xi_next[i], b.xi_tilde_next[i]);
            for j in 0..b.d_s() {
                assert_eq!(b.s_next_row(i)[j], b.s_row(i)[j] + b.a_row(i)[j]);
            }
        }
    }

    #[test]
    fn switching_with_one_state_is_rejected() {
        assert!(small(0.2, 0.5, 1, 0).validate().is_err());
    }

    #[test]
    fn render_difference_is_alpha_times_r_difference() {
        let cfg = small(0.0, 0.6, 4, 7);
        let em = build_emissions(&cfg, &RngStream::new(7, 0)).unwrap();
        let s: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let d = em.render(&s, 2).unwrap().iter().zip(em.render(&s, 1).unwrap()).map(|(a, b)| a - b).collect::<Vec<_>>();
        let expect = em.r[2].sub(&em.r[1]).scaled(0.6).matvec(&s);
        for (x, y) in d.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(em.render(&[0.0; 8], 3).unwrap(), vec![0.0; 32]);
        assert!(matches!(em.render(&s, 4), Err(EnvError::IndexOutOfRange { .. })));
    }

    #[test]
    fn noise_energy_decomposition() {
        let b = generate_from_seed(&small(0.3, 0.5, 8, 1)).unwrap();
        let r = noise_energy_report(&b);
        assert!(r.identity_rel_error <= 1e-12);
        assert!(r.bound_holds);
        assert!(r.lhs > 0.0);
        let zero = noise_energy_report(&generate_from_seed(&small(0.3, 0.0, 8, 1)).unwrap());
        assert_eq!(zero.lhs, 0.0);
        assert_eq!(zero.delta_h_hat, 0.0);
    }

    #[test]
    fn container_roundtrip_preserves_rows() {
        let b = generate_from_seed(&small(0.2, 0.5, 4, 8)).unwrap();
        let c = Container::read_from(&b.to_container().to_bytes()[..]).unwrap();
        let back = TransitionBatch::from_container(&c).unwrap();
        assert_eq!(back.s, b.s);
        assert_eq!(back.xi_tilde_next, b.xi_tilde_next);
        assert_eq!(back.field(Field::ONext, 17), b.field(Field::ONext, 17));
    }
}
