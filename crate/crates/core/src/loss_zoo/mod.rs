//! Differentiable loss models.
//!
//! Every model exposes value, gradient and Hessian-vector product analytically.
//! Models built from per-example terms `l_i(x) = (f_i(x) - b_i)^2` also expose the
//! per-example gradients and the output Jacobian rows `grad f_i`, which span the
//! normal space of the zero-loss manifold.

mod fd;
mod mlp;
mod quadratic;
mod toy;

pub use fd::{finite_diff_check, FdReport, FdTolerances};
pub use mlp::{mlp_regression_loss, Activation, Dataset, MlpLoss};
pub use quadratic::{quadratic_loss, QuadraticLoss, QuadraticSpec};
pub use toy::{toy_product_loss, ToyProductLoss};

use crate::{Error, ParamVector, Result};

/// A smooth loss `L: R^D -> R` with analytic first and second order oracles.
///
/// Implementations are immutable after construction; all methods are pure.
/// Methods assume `x.len() == self.dim()`; callers at API boundaries use
/// [`LossModel::check_dim`].
pub trait LossModel: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &ParamVector) -> f64;

    fn gradient(&self, x: &ParamVector) -> ParamVector;

    /// `grad^2 L(x) v`.
    fn hvp(&self, x: &ParamVector, v: &ParamVector) -> ParamVector;

    /// Gradients of the individual terms `l_i`, whose mean is `gradient(x)`.
    fn per_example_gradients(&self, _x: &ParamVector) -> Option<Vec<ParamVector>> {
        None
    }

    /// Gradients `grad f_i(x)` of the per-example model outputs.
    fn output_jacobian(&self, _x: &ParamVector) -> Option<Vec<ParamVector>> {
        None
    }

    /// `grad^3 L(x)[v, v, .]`, when known in closed form.
    fn third_directional(&self, _x: &ParamVector, _v: &ParamVector) -> Option<ParamVector> {
        None
    }

    fn name(&self) -> &str;

    fn check_dim(&self, x: &ParamVector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(())
    }
}

impl<T: LossModel + ?Sized> LossModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &ParamVector) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &ParamVector) -> ParamVector {
        (**self).gradient(x)
    }
    fn hvp(&self, x: &ParamVector, v: &ParamVector) -> ParamVector {
        (**self).hvp(x, v)
    }
    fn per_example_gradients(&self, x: &ParamVector) -> Option<Vec<ParamVector>> {
        (**self).per_example_gradients(x)
    }
    fn output_jacobian(&self, x: &ParamVector) -> Option<Vec<ParamVector>> {
        (**self).output_jacobian(x)
    }
    fn third_directional(&self, x: &ParamVector, v: &ParamVector) -> Option<ParamVector> {
        (**self).third_directional(x, v)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// `sqrt(L(x))` with losses below [`crate::LOSS_FLOOR`] clamped to zero.
pub fn sqrt_loss(model: &dyn LossModel, x: &ParamVector) -> f64 {
    let l = model.value(x);
    if l < crate::LOSS_FLOOR {
        0.0
    } else {
        l.sqrt()
    }
}
