//! Latent action models under exogenous noise.
//!
//! * [`numerics`]: dense linear algebra, Adam, seeded streams, gradient checks.
//! * [`exbmdp`]: synthetic linear Ex-BMDP datasets.
//! * [`linear_lam`]: the linear IDM/FDM model, its three objectives and training.
//! * [`grid_lam`]: the 4×4 grid world and a small VQ latent action model.
//! * [`evaluation`]: probes and leakage/consistency metrics.
//! * [`oracles`]: closed-form oracles and numerical verifiers.

pub mod container;
pub mod evaluation;
pub mod exbmdp;
pub mod grid_lam;
pub mod linear_lam;
pub mod numerics;
pub mod oracles;
