use serde::Serialize;

use super::LossModel;
use crate::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdTolerances {
    pub gradient: f64,
    pub hvp: f64,
}

impl Default for FdTolerances {
    fn default() -> Self {
        FdTolerances { gradient: 1e-5, hvp: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    /// `|grad - fd|_inf / (1 + |grad|_inf)`.
    pub gradient_error: f64,
    /// Worst column of `|H e_j - fd_j|_inf / (1 + |H e_j|_inf)`.
    pub hvp_error: f64,
    pub non_finite: bool,
    pub passed: bool,
}

fn rel_err(analytic: &ParamVector, approx: &ParamVector) -> f64 {
    (analytic - approx).amax() / (1.0 + analytic.amax())
}

/// Compares the analytic gradient against central differences of the value,
/// and every Hessian column `hvp(x, e_j)` against central differences of the
/// gradient. The step along coordinate `j` is `cbrt(eps) * max(1, |x_j|)`.
pub fn finite_diff_check(model: &dyn LossModel, x: &ParamVector, tol: FdTolerances) -> FdReport {
    let d = model.dim();
    let base = f64::EPSILON.cbrt();
    let grad = model.gradient(x);
    let mut fd_grad = ParamVector::zeros(d);
    let mut hvp_error: f64 = 0.0;
    let mut probe = x.clone();
    for j in 0..d {
        let h = base * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let (f_plus, g_plus) = (model.value(&probe), model.gradient(&probe));
        probe[j] = x[j] - h;
        let (f_minus, g_minus) = (model.value(&probe), model.gradient(&probe));
        probe[j] = x[j];
        // Use the realised step to cancel representation error in x_j +- h.
        let step = (x[j] + h) - (x[j] - h);
        fd_grad[j] = (f_plus - f_minus) / step;
        let fd_col = (g_plus - g_minus) / step;
        let mut e = ParamVector::zeros(d);
        e[j] = 1.0;
        let col = model.hvp(x, &e);
        let err = rel_err(&col, &fd_col);
        hvp_error = if err.is_nan() { f64::NAN } else { hvp_error.max(err) };
    }
    let gradient_error = rel_err(&grad, &fd_grad);
    let non_finite = !gradient_error.is_finite() || !hvp_error.is_finite();
    let passed = !non_finite && gradient_error <= tol.gradient && hvp_error <= tol.hvp;
    FdReport { gradient_error, hvp_error, non_finite, passed }
}
