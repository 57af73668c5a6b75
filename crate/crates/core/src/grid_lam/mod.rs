//! Nonlinear latent action model on a 4×4 grid world with exogenous pixels.
//!
//! [`env`] generates the data, [`tape`] is the small reverse-mode engine the
//! model is built on, [`model`] holds the encoder/decoder/codebook and
//! [`train`] the objectives, training loop and held-out metrics.

pub mod env;
pub mod model;
pub mod tape;
pub mod train;

pub use env::{generate_grid, snaking_policy, Action, GridDataset, GridEnvConfig, GridTransition, EXO_REGION};
pub use model::{decode, encode, Encoded, GridLamParams, GridModelConfig};
pub use train::{
    eval_dataset, evaluate_grid, gradient_check, grid_losses, labeled_rows, train_grid, GridBatch, GridHistoryPoint, GridLosses, GridMetrics,
    GridObjective, GridTrainConfig, GridTrainOutput, GridTrainState,
};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("cell {0:?} is outside the controllable rows 0-2")]
    NotControllable((usize, usize)),
    #[error("robust objective needs labeled rows, but label_fraction selects none")]
    NoLabels,
    #[error("non-finite loss at step {step} ({losses}); config: {config}")]
    NonFinite { step: u64, losses: String, config: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
}
