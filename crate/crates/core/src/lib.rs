//! Stochastic subspace identification of noise-driven linear systems.
//!
//! The crate estimates `(A, C, K)` of a steady-state Kalman filter from a
//! single output trajectory, evaluates finite-sample error bounds for the
//! estimate, and provides a seeded Monte Carlo harness that checks those
//! bounds and the empirical convergence rate.

pub mod bounds;
pub mod error;
pub mod harness;
pub mod identify;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod serde_mat;
pub mod simulate;
pub mod structmats;

pub use error::{Result, SsidError};
pub use identify::{balanced_realization, identify, regress_hankel, HankelEstimate, Realization};
pub use model::{check_assumptions, solve_dare, spectral_radius, StateSpace, SteadyKalman};
pub use simulate::{simulate_innovation, simulate_statespace, SimConfig, Trajectory};
pub use structmats::{build_data_matrices, hankel_true, DataMatrices, HankelParams};
