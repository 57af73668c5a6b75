//! Dense linear algebra, optimization, randomness and gradient checking.

mod adam;
mod decomp;
mod finite_diff;
mod matrix;
mod rng;
mod whiten;

pub use adam::{adam_state_for, adam_step, AdamConfig, AdamState};
pub use decomp::{cholesky, cholesky_solve, ridge_solve, svd, sym_eigen, SvdResult, SVD_MAX_SWEEPS, SVD_TOL};
pub use finite_diff::{finite_diff_grad, relative_error};
pub use matrix::{gemm_into, Matrix, Trans};
pub use rng::{splitmix64, RngStream};
pub use whiten::{covariance, whiten, Whitening, DEFAULT_WHITEN_EPS};

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("Jacobi iteration on a {rows}x{cols} matrix did not converge within {sweeps} sweeps")]
    NoConvergence { rows: usize, cols: usize, sweeps: usize },
    #[error("rank-deficient system ({rows}x{cols} design) at zero ridge penalty")]
    RankDeficient { rows: usize, cols: usize },
    #[error("covariance has a negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),
}
