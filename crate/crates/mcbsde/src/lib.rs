//! Solvers and verification tools for backward stochastic differential
//! equations (BSDEs) and reflected BSDEs driven by a finite-state Markov
//! chain martingale.
//!
//! The chain lives on the unit vectors of `R^N` and satisfies
//! `X_t = X_0 + int A_s X_s ds + M_t`. For Markovian data the BSDE
//!
//! ```text
//! Y_t = xi + int_t^T f(s, Y_s, Z_s) ds - int_t^T Z_s' dM_s
//! ```
//!
//! reduces to a coupled backward ODE system for the per-state value function,
//! which [`bsde::solve_bsde`] integrates with a classical Runge-Kutta sweep.
//! Reflected equations keep the solution above an obstacle through an
//! increasing push process; [`rbsde::solve_rbsde`] builds it by penalization
//! with a projection scheme as an independent cross-check. The
//! [`montecarlo`] module verifies martingale identities (Ito isometry,
//! bracket compensation) on simulated paths, and [`harness`] packages
//! property suites for the comparison, estimate and continuous-dependence
//! results behind a CLI.

pub mod bsde;
pub mod chain;
pub mod error;
pub mod harness;
pub mod montecarlo;
pub mod rbsde;

pub use error::{Error, Result};
