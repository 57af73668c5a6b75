//! Linear latent action model.
//!
//! `z = C o + D o'` (inverse dynamics) and `ô' = A o + B z` (forward dynamics),
//! trained on the reconstruction objective plus two optional auxiliaries:
//! cross-exogenous reconstruction (latent taken from the paired stream) and
//! prediction of an exogenous-robust target `y ≈ W z`.

mod moments;
mod objective;
mod train;

use crate::container::{Container, ContainerError, Tensor};
use crate::numerics::{Matrix, RngStream};

pub use moments::{
    closed_form_optimum, fit_pair_map, pair_loss, train_moment_lam, IdmMoments, MomentAccumulator, MomentFit,
    MomentTrainConfig, PairFit,
};
pub use objective::{evaluate_block, gather_block, grad_total, loss_lam, loss_robust, loss_xexo, Block, LossBreakdown, Needs};
pub use train::{train, train_params, HistoryPoint, LinearTrainConfig, RobustTarget, TrainOutput, TrainState};

#[derive(Debug, thiserror::Error)]
pub enum LamError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("batch has no paired exogenous stream; regenerate with n_xi >= 2 to use the cross-exogenous objective")]
    MissingPairs,
    #[error("robust head W is {got:?} but the target needs {expected:?}")]
    RobustShape { got: (usize, usize), expected: (usize, usize) },
    #[error("robust objective requested but the model has no W head")]
    MissingHead,
    #[error("non-finite loss at step {step} (config: {config})")]
    NonFinite { step: u64, config: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLamParams {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub w: Option<Matrix>,
}

impl LinearLamParams {
    /// A, C, D ~ N(0, 1/d_o); B, W ~ N(0, 1/d_z).
    pub fn init(d_o: usize, d_z: usize, d_y: Option<usize>, rng: &mut RngStream) -> Result<Self, LamError> {
        if d_z == 0 || d_z >= d_o {
            return Err(LamError::Dimension(format!("need 0 < d_z < d_o, got d_z={d_z}, d_o={d_o}")));
        }
        Ok(Self::init_unchecked(d_o, d_z, d_y, rng))
    }

    pub(crate) fn init_unchecked(d_o: usize, d_z: usize, d_y: Option<usize>, rng: &mut RngStream) -> Self {
        let so = 1.0 / (d_o as f64).sqrt();
        let sz = 1.0 / (d_z as f64).sqrt();
        let mut g = |r: usize, c: usize, s: f64| Matrix::from_vec(r, c, rng.gaussian_vec(r * c, s)).expect("shape");
        let a = g(d_o, d_o, so);
        let b = g(d_o, d_z, sz);
        let c = g(d_z, d_o, so);
        let d = g(d_z, d_o, so);
        let w = d_y.map(|dy| g(dy, d_z, sz));
        Self { a, b, c, d, w }
    }

    /// `A = 0, B = I, C = 0, D = I` with `d_z = d_o`: ô' = o' exactly.
    pub fn copy_shortcut(d_o: usize) -> Self {
        Self {
            a: Matrix::zeros(d_o, d_o),
            b: Matrix::identity(d_o),
            c: Matrix::zeros(d_o, d_o),
            d: Matrix::identity(d_o),
            w: None,
        }
    }

    pub fn d_o(&self) -> usize {
        self.a.rows()
    }

    pub fn d_z(&self) -> usize {
        self.b.cols()
    }

    pub fn idm(&self, o: &[f64], o_next: &[f64]) -> Result<Vec<f64>, LamError> {
        self.check_obs(o)?;
        self.check_obs(o_next)?;
        let mut z = self.c.matvec(o);
        z.iter_mut().zip(self.d.matvec(o_next)).for_each(|(a, b)| *a += b);
        Ok(z)
    }

    pub fn fdm(&self, o: &[f64], z: &[f64]) -> Result<Vec<f64>, LamError> {
        self.check_obs(o)?;
        if z.len() != self.d_z() {
            return Err(LamError::Dimension(format!("latent has length {}, expected {}", z.len(), self.d_z())));
        }
        let mut out = self.a.matvec(o);
        out.iter_mut().zip(self.b.matvec(z)).for_each(|(a, b)| *a += b);
        Ok(out)
    }

    /// Latents for a block of observations (rows are samples).
    pub fn encode_rows(&self, o: &Matrix, o_next: &Matrix) -> Matrix {
        let mut z = o.matmul_nt(&self.c);
        crate::numerics::gemm_into(1.0, o_next, crate::numerics::Trans::No, &self.d, crate::numerics::Trans::Yes, 1.0, &mut z);
        z
    }

    fn check_obs(&self, o: &[f64]) -> Result<(), LamError> {
        if o.len() != self.d_o() {
            return Err(LamError::Dimension(format!("observation has length {}, expected {}", o.len(), self.d_o())));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut n = vec!["A", "B", "C", "D"];
        if self.w.is_some() {
            n.push("W");
        }
        n
    }

    pub fn to_list(&self) -> Vec<Matrix> {
        let mut v = vec![self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone()];
        if let Some(w) = &self.w {
            v.push(w.clone());
        }
        v
    }

    pub fn from_list(list: &[Matrix]) -> Self {
        Self {
            a: list[0].clone(),
            b: list[1].clone(),
            c: list[2].clone(),
            d: list[3].clone(),
            w: list.get(4).cloned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_list().iter().all(Matrix::is_finite)
    }

    pub fn push_tensors(&self, c: &mut Container, prefix: &str) {
        for (name, m) in self.names().into_iter().zip(self.to_list()) {
            c.push(Tensor::f64(&format!("{prefix}{name}"), &[m.rows(), m.cols()], m.into_vec()));
        }
    }

    pub fn from_tensors(c: &Container, prefix: &str) -> Result<Self, LamError> {
        let get = |n: &str| -> Result<Matrix, LamError> {
            let (dims, data) = c.f64s(&format!("{prefix}{n}"))?;
            if dims.len() != 2 {
                return Err(ContainerError::Malformed(format!("{prefix}{n} is not a matrix")).into());
            }
            Ok(Matrix::from_vec(dims[0], dims[1], data.to_vec())?)
        };
        let w = match c.get(&format!("{prefix}W")) {
            Ok(_) => Some(get("W")?),
            Err(_) => None,
        };
        Ok(Self { a: get("A")?, b: get("B")?, c: get("C")?, d: get("D")?, w })
    }
}
