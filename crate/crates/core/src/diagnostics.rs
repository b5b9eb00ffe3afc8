//! Stableness along the gradient segment, its cheap lower bound, and the two-step
//! edge-of-stability identities evaluated over a trace.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::loss_zoo::LossModel;
use crate::optimizers::{StepRule, Trace, TraceRecord};
use crate::spectral::{top_eigenpairs, top_eigenpairs_op, PowerConfig};
use crate::{Error, ParamVector, Result, LOSS_FLOOR};

pub const DEFAULT_GRID_N: usize = 16;
/// Up to this dimension the `sqrt L` Hessian is assembled and solved densely.
pub const DENSE_MAX_DIM: usize = 50;
/// Reported `sqrt L` stableness values are capped here; larger values raise the divergence flag.
pub const SQRT_STABLENESS_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StablenessResult {
    /// `eta_eff * max_s lambda_1(H(x - s grad L))` over the grid.
    pub value: f64,
    /// `eta_eff * lambda_1(H(x))`.
    pub lower_bound: f64,
    pub grid_points: usize,
    pub argmax_s: f64,
    /// False if any grid eigenpair failed to converge.
    pub converged: bool,
}

/// Stableness of `L` at `x` with effective learning rate `eta_eff`.
///
/// `lambda_1` is evaluated at `grid_n + 1` equispaced `s` in `[0, eta_eff]` along the
/// raw gradient ray `x - s grad L(x)`.
pub fn stableness(
    model: &dyn LossModel,
    x: &ParamVector,
    eta_eff: f64,
    grid_n: usize,
    power: &PowerConfig,
) -> Result<StablenessResult> {
    model.check_dim(x)?;
    if grid_n == 0 {
        return Err(Error::Invalid("grid_n must be at least 1".into()));
    }
    if !(eta_eff >= 0.0 && eta_eff.is_finite()) {
        return Err(Error::Invalid(format!("effective learning rate {eta_eff}")));
    }
    let g = model.gradient(x);
    if g.norm() <= LOSS_FLOOR {
        return Err(Error::UndefinedUpdate("stableness at a critical point".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut lower = 0.0;
    let mut converged = true;
    for i in 0..=grid_n {
        let s = eta_eff * i as f64 / grid_n as f64;
        let info = top_eigenpairs(model, &(x - &g * s), 1, power)?;
        converged &= info.converged;
        let l1 = info.lambda1();
        if i == 0 {
            lower = l1;
        }
        if l1 > best.0 {
            best = (l1, s);
        }
    }
    Ok(StablenessResult {
        value: (eta_eff * best.0).max(0.0),
        lower_bound: eta_eff * lower,
        grid_points: grid_n + 1,
        argmax_s: best.1,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SqrtStablenessResult {
    /// Stableness of `sqrt L` with learning rate `eta`, capped at [`SQRT_STABLENESS_CAP`].
    pub value: f64,
    pub diverged: bool,
    /// `eta * lambda_1(hess sqrt L (x))`.
    pub lower_bound: f64,
}

fn sqrt_hvp(model: &dyn LossModel, y: &ParamVector, v: &ParamVector) -> ParamVector {
    let l = model.value(y).max(LOSS_FLOOR);
    let g = model.gradient(y);
    (model.hvp(y, v) * (2.0 * l) - &g * g.dot(v)) / (4.0 * l.powf(1.5))
}

/// Minimiser of a unimodal function on `[a, b]` by golden-section search.
fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= f64::EPSILON * (a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Stableness of `sqrt L` at `x` for GD on `sqrt L` with learning rate `eta`.
///
/// The Hessian of `sqrt L` is singular where the segment crosses the zero set, so
/// the grid maximum of its top eigenvalue is combined with a second difference of
/// `sqrt L` at the segment minimiser of `sqrt L`, which picks up the kink.
pub fn sqrt_stableness(
    model: &dyn LossModel,
    x: &ParamVector,
    eta: f64,
    grid_n: usize,
    power: &PowerConfig,
) -> Result<SqrtStablenessResult> {
    model.check_dim(x)?;
    if grid_n == 0 {
        return Err(Error::Invalid("grid_n must be at least 1".into()));
    }
    let l = model.value(x);
    if l <= LOSS_FLOOR {
        return Err(Error::UndefinedUpdate("sqrt stableness at zero loss".into()));
    }
    let d = model.gradient(x) / (2.0 * l.sqrt());
    let dn2 = d.norm_squared();
    if dn2.sqrt() <= LOSS_FLOOR {
        return Err(Error::UndefinedUpdate("sqrt stableness at a critical point".into()));
    }
    let dim = model.dim();
    let mut sup = f64::NEG_INFINITY;
    let mut lower = 0.0;
    for i in 0..=grid_n {
        let y = x - &d * (eta * i as f64 / grid_n as f64);
        let l1 = if dim <= DENSE_MAX_DIM {
            let cols: Vec<ParamVector> = (0..dim).map(|j| sqrt_hvp(model, &y, &ParamVector::from_fn(dim, |i, _| f64::from(i == j)))).collect();
            let h = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (cols[j][i] + cols[i][j]));
            SymmetricEigen::new(h).eigenvalues.max()
        } else {
            top_eigenpairs_op(|v| sqrt_hvp(model, &y, v), dim, 1, power)?.lambda1()
        };
        if i == 0 {
            lower = l1;
        }
        sup = sup.max(l1);
    }
    let h = |s: f64| model.value(&(x - &d * s)).max(0.0).sqrt();
    let s_star = golden_min(h, 0.0, eta);
    let delta = 1e-7 * eta;
    // A minimiser at an endpoint means sqrt L is monotone on the segment.
    if s_star > 2.0 * delta && s_star < eta - 2.0 * delta {
        let second = (h(s_star + delta) - 2.0 * h(s_star) + h(s_star - delta)) / (delta * delta);
        sup = sup.max(second / dn2);
    }
    let raw = eta * sup;
    let diverged = raw.is_nan() || raw > SQRT_STABLENESS_CAP;
    Ok(SqrtStablenessResult { value: if diverged { SQRT_STABLENESS_CAP } else { raw.max(0.0) }, diverged, lower_bound: eta * lower })
}

/// One consecutive pair `(t, t + 1)` of diagnosed steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EosPairRecord {
    pub step: u64,
    pub lambda1: f64,
    /// `sqrt L_t + sqrt L_{t+1}`.
    pub sqrt_sum: f64,
    /// `1/S_t + 1/S_{t+1}` with `S` the stableness at `eta / |grad L|` (normalized GD runs).
    pub inv_stableness_sum: Option<f64>,
    /// `eta sqrt(lambda_1 / 2)`.
    pub ngd_predicted: f64,
    pub ngd_ratio: f64,
    /// `eta lambda_1`.
    pub sqrt_predicted: f64,
    pub sqrt_ratio: f64,
    /// Stableness of `sqrt L` at step `t` (GD on `sqrt L` runs).
    pub sqrt_stableness: Option<SqrtStablenessResult>,
    pub inv_stableness_deviation: Option<f64>,
    pub ngd_deviation: f64,
    pub sqrt_deviation: f64,
}

fn lambda1_of(model: &dyn LossModel, r: &TraceRecord, power: &PowerConfig) -> Result<f64> {
    match &r.diagnostics {
        Some(d) if d.lambda1_at_x.is_finite() => Ok(d.lambda1_at_x),
        _ => Ok(top_eigenpairs(model, &r.x, 1, power)?.lambda1()),
    }
}

fn ngd_stableness(model: &dyn LossModel, r: &TraceRecord, eta: f64, grid_n: usize, power: &PowerConfig) -> Result<f64> {
    if let Some(s) = r.diagnostics.as_ref().and_then(|d| d.stableness.as_ref()) {
        return Ok(s.value);
    }
    Ok(stableness(model, &r.x, eta / r.grad_norm, grid_n, power)?.value)
}

/// Two-step identities for every consecutive pair of diagnosed records.
///
/// Stored diagnostics are reused where present. Pairs across a gap in the step
/// column (such as a terminated trace) are skipped.
pub fn eos_two_step_report(
    model: &dyn LossModel,
    trace: &Trace,
    eta: f64,
    grid_n: usize,
    power: &PowerConfig,
) -> Result<Vec<EosPairRecord>> {
    let rule = trace.kind.rule;
    let pairs: Vec<(&TraceRecord, &TraceRecord)> = trace
        .records
        .windows(2)
        .filter(|w| w[1].step == w[0].step + 1 && w[0].diagnostics.is_some() && w[1].diagnostics.is_some())
        .map(|w| (&w[0], &w[1]))
        .collect();
    pairs
        .par_iter()
        .map(|(a, b)| {
            let lambda1 = lambda1_of(model, a, power)?;
            let sqrt_sum = a.sqrt_loss + b.sqrt_loss;
            let inv_stableness_sum = if rule == StepRule::NormalizedGd {
                let sa = ngd_stableness(model, a, eta, grid_n, power)?;
                let sb = ngd_stableness(model, b, eta, grid_n, power)?;
                Some(1.0 / sa + 1.0 / sb)
            } else {
                None
            };
            let sqrt_stableness =
                if rule == StepRule::SqrtLossGd { Some(sqrt_stableness(model, &a.x, eta, grid_n, power)?) } else { None };
            let ngd_predicted = eta * (lambda1 / 2.0).sqrt();
            let sqrt_predicted = eta * lambda1;
            let ngd_ratio = sqrt_sum / ngd_predicted;
            let sqrt_ratio = sqrt_sum / sqrt_predicted;
            Ok(EosPairRecord {
                step: a.step,
                lambda1,
                sqrt_sum,
                inv_stableness_deviation: inv_stableness_sum.map(|v| v - 1.0),
                inv_stableness_sum,
                ngd_predicted,
                ngd_ratio,
                sqrt_predicted,
                sqrt_ratio,
                sqrt_stableness,
                ngd_deviation: ngd_ratio - 1.0,
                sqrt_deviation: sqrt_ratio - 1.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_zoo::{quadratic_loss, toy_product_loss, QuadraticSpec};
    use nalgebra::dvector;

    #[test]
    fn quadratic_stableness_is_eta_lambda1() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        for (x, eta) in [(dvector![1.0, 1.0], 1.5), (dvector![-0.2, 3.0], 2.5), (dvector![0.0, 1.0], 0.1)] {
            let s = stableness(&q, &x, eta, 16, &PowerConfig::default()).unwrap();
            assert!((s.value - eta).abs() < 1e-12, "{}", s.value);
            assert!((s.lower_bound - eta).abs() < 1e-12);
            assert_eq!(s.grid_points, 17);
        }
    }

    #[test]
    fn toy_grid_oracle() {
        let m = toy_product_loss();
        let x = dvector![1.0, 0.1];
        let eta = 0.3;
        let s = stableness(&m, &x, eta, 16, &PowerConfig::default()).unwrap();
        let g = m.gradient(&x);
        let oracle = (0..=16)
            .map(|i| {
                let p = &x - &g * (eta * i as f64 / 16.0);
                let (a, b) = (p[0], p[1]);
                let (h11, h12, h22) = (2.0 * b * b, 4.0 * a * b, 2.0 * (1.0 + a * a));
                0.5 * (h11 + h22) + (0.25 * (h11 - h22).powi(2) + h12 * h12).sqrt()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((s.value - eta * oracle).abs() < 1e-10);
        assert!(s.value >= s.lower_bound - 1e-8);
    }

    #[test]
    fn refinement_is_monotone() {
        let m = toy_product_loss();
        let x = dvector![0.7, -0.2];
        let mut prev = 0.0;
        for n in [2, 4, 8, 16, 32] {
            let s = stableness(&m, &x, 0.4, n, &PowerConfig::default()).unwrap().value;
            assert!(s >= prev - 1e-12);
            prev = s;
        }
    }

    #[test]
    fn critical_point_rejected() {
        let m = toy_product_loss();
        assert!(stableness(&m, &dvector![1.0, 0.0], 0.1, 16, &PowerConfig::default()).is_err());
        assert!(stableness(&m, &dvector![1.0, 0.1], 0.1, 0, &PowerConfig::default()).is_err());
    }

    #[test]
    fn sqrt_stableness_kink_crossing() {
        let m = toy_product_loss();
        // GD on sqrt L from y > 0 with a step that crosses y = 0.
        let x = dvector![1.0, 0.005];
        let s = sqrt_stableness(&m, &x, 0.02, 16, &PowerConfig::default()).unwrap();
        assert!(s.diverged);
        assert_eq!(s.value, SQRT_STABLENESS_CAP);
    }

    #[test]
    fn sqrt_stableness_smooth_case() {
        // sqrt of a 1-D quadratic is |x| sqrt(a/2): flat away from 0.
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![2.0])).unwrap();
        let s = sqrt_stableness(&q, &dvector![1.0], 0.1, 8, &PowerConfig::default()).unwrap();
        assert!(!s.diverged);
        assert!(s.value.abs() < 1e-3, "{}", s.value);
    }

    #[test]
    fn golden_section() {
        let m = golden_min(|s| (s - 0.3).abs(), 0.0, 1.0);
        assert!((m - 0.3).abs() < 1e-14);
    }
}
