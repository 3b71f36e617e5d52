//! Data-driven predictive control with prediction matrices estimated from
//! input/output data, including a rate-based integral-action variant.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense kernel (pseudo-inverse, Cholesky, SPD solves).
//! - [`simsys`]: plant models, excitation signals, noise, open-loop simulation.
//! - [`estimation`]: Hankel data matrices and least-squares predictor estimation.
//! - [`mpc`]: model-based prediction, cost and constraint matrices, DARE/LQR.
//! - [`qp`]: Hildreth dual QP solver and soft-constraint relaxation.
//! - [`controller`]: receding-horizon controllers, closed-loop simulation, metrics.

pub mod controller;
pub mod estimation;
pub mod linalg;
pub mod mpc;
pub mod qp;
pub mod simsys;

pub use linalg::{Matrix, Vector};
