//! Numerical laboratory for the edge-of-stability behaviour of Normalized GD
//! and GD on `sqrt(L)`.
//!
//! The crate is organised bottom-up:
//!
//! * [`loss_zoo`] : smooth losses with analytic gradient / Hessian-vector oracles.
//! * [`spectral`] : matrix-free top eigenpairs of the Hessian and the gradient of
//!   the top eigenvalue.
//! * [`manifold`] : the gradient-flow limit map `Phi`, normal/tangent projectors and
//!   the manifold-relative observables (`R_j`, `theta`, alignment).
//! * [`optimizers`] : GD, Normalized GD, GD on `sqrt(L)`, noise injection and the
//!   trace-recording driver.
//! * [`quadratic_lab`] : exact tilde dynamics on quadratics and checkers for the
//!   invariant-set and alignment lemmas.
//! * [`limiting_flow`] : the sharpness-reducing Riemannian flows on the minimizer
//!   manifold and trajectory comparison.
//! * [`diagnostics`] : stableness and the two-step edge-of-stability identities.

pub mod diagnostics;
pub mod error;
pub mod limiting_flow;
pub mod loss_zoo;
pub mod manifold;
pub mod optimizers;
pub mod quadratic_lab;
pub mod spectral;

pub use error::{Error, Result};

/// A point (or direction) in parameter space.
pub type ParamVector = nalgebra::DVector<f64>;

/// Values below this are treated as zero loss / zero gradient norm.
pub const LOSS_FLOOR: f64 = 1e-300;
