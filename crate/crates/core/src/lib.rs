//! Local-volatility calibration from European call quotes.
//!
//! The variance `a = sigma^2 / 2` lives on a uniform mesh in time to maturity
//! and log-moneyness. Prices come from a Crank–Nicolson discretization of the
//! Dupire forward equation; calibration is by Tikhonov-regularized gradient
//! descent or by an iterative ensemble Kalman filter, optionally with the
//! underlying price treated as an unknown.

pub mod black_scholes;
pub mod cli;
pub mod data;
pub mod enkf;
pub mod error;
pub mod forward;
pub mod mesh;
pub mod metrics;
pub mod minimize;
pub mod s0;
pub mod smoothing;
pub mod tikhonov;
pub mod tridiag;

pub use error::{Error, GainStage, Result};
pub use forward::{adjoint_gradient, predict_data, solve_forward, ForwardParams};
pub use mesh::{
    build_mesh, build_observation_operator, MeshSpec, ObservationOperator, ObservationSet, PriceSurface, Quote,
    VarianceSurface, A_FLOOR,
};
