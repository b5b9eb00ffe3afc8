//! Projected Euler integration of the sharpness-reducing flows on the minimizer
//! manifold, and comparison of flow trajectories with optimizer traces.
//!
//! One flow step moves along the tangent part of `grad lambda_1` (divided by
//! `lambda_1` for the log flow), scaled by `coefficient * eta_flow`, then pulls the
//! point back to the manifold with plain GD.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss_zoo::LossModel;
use crate::manifold::{estimate_phi, normal_projection, PhiConfig, ProjectionMethod};
use crate::optimizers::{StepRule, TraceRecord};
use crate::spectral::{grad_top_eigenvalue, top_eigenpairs, PowerConfig};
use crate::{Error, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// Descends `log lambda_1`; pairs with normalized GD.
    LogFlow,
    /// Descends `lambda_1`; pairs with GD on `sqrt L`.
    PlainFlow,
}

impl FlowKind {
    /// 1/4 for the log flow and 1/8 for the plain flow: with these, flow time
    /// equals `step * eta^2` of the paired optimizer.
    pub fn default_coefficient(self) -> f64 {
        match self {
            FlowKind::LogFlow => 0.25,
            FlowKind::PlainFlow => 0.125,
        }
    }

    pub fn paired_rule(self) -> StepRule {
        match self {
            FlowKind::LogFlow => StepRule::NormalizedGd,
            FlowKind::PlainFlow => StepRule::SqrtLossGd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// `None` picks the per-example span when the model provides output gradients.
    pub method: Option<ProjectionMethod>,
    /// Re-projection GD step; clamped to `1 / lambda_1` when larger.
    pub eta_proj: f64,
    pub t_proj: usize,
    pub tol_manifold: f64,
    /// Eigenpairs computed per step (clamped to the dimension).
    pub k: usize,
    pub power: PowerConfig,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { method: None, eta_proj: 1e-2, t_proj: 1000, tol_manifold: 1e-10, k: 4, power: PowerConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub eta_flow: f64,
    pub coefficient: f64,
    pub proj: ProjectionConfig,
}

impl FlowConfig {
    pub fn new(kind: FlowKind, eta_flow: f64) -> Self {
        FlowConfig { kind, eta_flow, coefficient: kind.default_coefficient(), proj: ProjectionConfig::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta_flow > 0.0 && self.eta_flow.is_finite()) {
            return Err(Error::Invalid(format!("eta_flow must be positive, got {}", self.eta_flow)));
        }
        if !(self.coefficient.is_finite() && self.coefficient > 0.0) {
            return Err(Error::Invalid(format!("flow coefficient must be positive, got {}", self.coefficient)));
        }
        if !(self.proj.eta_proj > 0.0 && self.proj.tol_manifold > 0.0) {
            return Err(Error::Invalid("projection step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowState {
    pub x: ParamVector,
    pub tau: f64,
    pub lambda1: f64,
    pub flow_kind: FlowKind,
    pub residual_grad_norm: f64,
    /// Eigengap degeneracy at the point the step was taken from.
    pub warning: Option<String>,
}

/// GD at `eta_proj` until `|grad L| <= tol_manifold`, at most `t_proj` steps.
pub fn reproject(model: &dyn LossModel, x: &ParamVector, lambda1: f64, cfg: &ProjectionConfig) -> Result<(ParamVector, f64)> {
    let eta = if lambda1 > 0.0 { cfg.eta_proj.min(1.0 / lambda1) } else { cfg.eta_proj };
    let mut y = x.clone();
    let mut g = model.gradient(&y);
    for _ in 0..cfg.t_proj {
        if g.norm() <= cfg.tol_manifold {
            break;
        }
        y.axpy(-eta, &g, 1.0);
        g = model.gradient(&y);
    }
    let residual = g.norm();
    if !residual.is_finite() {
        return Err(Error::NonFinite("re-projection".into()));
    }
    if residual > cfg.tol_manifold {
        return Err(Error::NotConverged { what: "re-projection", residual });
    }
    Ok((y, residual))
}

/// Tangent component of `grad lambda_1` at an on-manifold point, with `lambda_1`
/// and any eigengap warning.
pub fn tangent_sharpness_gradient(
    model: &dyn LossModel,
    x: &ParamVector,
    cfg: &ProjectionConfig,
) -> Result<(ParamVector, f64, Option<String>)> {
    let info = top_eigenpairs(model, x, cfg.k.clamp(1, model.dim()), &cfg.power)?;
    let grad = grad_top_eigenvalue(model, x, &info)?;
    let method = cfg.method.unwrap_or(if model.output_jacobian(x).is_some() {
        ProjectionMethod::PerExampleSpan
    } else {
        ProjectionMethod::HessianEigvecs
    });
    let proj = normal_projection(model, x, method, &info)?;
    Ok((proj.tangent(&grad.gradient), info.lambda1(), grad.warning))
}

/// One Euler step of the flow followed by re-projection; `tau` advances by `eta_flow`.
pub fn flow_step(model: &dyn LossModel, state: &FlowState, cfg: &FlowConfig) -> Result<FlowState> {
    cfg.validate()?;
    model.check_dim(&state.x)?;
    let (tangent, lambda1, warning) = tangent_sharpness_gradient(model, &state.x, &cfg.proj)?;
    let scale = match cfg.kind {
        FlowKind::LogFlow => {
            if lambda1 <= 0.0 {
                return Err(Error::DegenerateManifold(format!("lambda_1 = {lambda1:e} on the log flow")));
            }
            cfg.coefficient * cfg.eta_flow / lambda1
        }
        FlowKind::PlainFlow => cfg.coefficient * cfg.eta_flow,
    };
    let moved = &state.x - tangent * scale;
    let (x, residual) = reproject(model, &moved, lambda1, &cfg.proj)?;
    let lambda1 = top_eigenpairs(model, &x, 1, &cfg.proj.power)?.lambda1();
    Ok(FlowState { x, tau: state.tau + cfg.eta_flow, lambda1, flow_kind: cfg.kind, residual_grad_norm: residual, warning })
}

/// Projects `x0` to the manifold with `Phi`, then takes `ceil(tau_end / eta_flow)`
/// flow steps. Stops after the first step that reports an eigengap warning.
pub fn integrate_flow(model: &dyn LossModel, x0: &ParamVector, tau_end: f64, cfg: &FlowConfig) -> Result<Vec<FlowState>> {
    cfg.validate()?;
    if !(tau_end >= 0.0 && tau_end.is_finite()) {
        return Err(Error::Invalid(format!("tau_end must be non-negative, got {tau_end}")));
    }
    let phi = estimate_phi(model, x0, &PhiConfig { tol_phi: Some(cfg.proj.tol_manifold), ..PhiConfig::default() })?;
    if !phi.converged {
        return Err(Error::NotConverged { what: "initial projection", residual: phi.residual_grad_norm });
    }
    let mut states = vec![FlowState {
        lambda1: phi.spectral.lambda1(),
        residual_grad_norm: phi.residual_grad_norm,
        x: phi.phi,
        tau: 0.0,
        flow_kind: cfg.kind,
        warning: None,
    }];
    let steps = (tau_end / cfg.eta_flow - 1e-9).ceil().max(0.0) as usize;
    for i in 1..=steps {
        let mut next = flow_step(model, states.last().expect("non-empty"), cfg)?;
        next.tau = i as f64 * cfg.eta_flow;
        let stop = next.warning.is_some();
        states.push(next);
        if stop {
            break;
        }
    }
    Ok(states)
}

/// Map from optimizer steps to flow time: `tau = step * eta^2 * c_time`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeScaling {
    pub eta: f64,
    pub c_time: f64,
    pub convention: String,
}

impl TimeScaling {
    /// Scaling for an optimizer with learning rate `eta` against a flow integrated
    /// with `coefficient`: `c_time = k / coefficient` with `k = 1/4` for normalized
    /// GD and `1/8` for GD on `sqrt L`.
    pub fn new(rule: StepRule, eta: f64, coefficient: f64) -> Result<Self> {
        let k = match rule {
            StepRule::NormalizedGd => 0.25,
            StepRule::SqrtLossGd => 0.125,
            StepRule::Gd => return Err(Error::Unsupported("plain GD has no limiting flow time map")),
        };
        let c_time = k / coefficient;
        let convention = format!(
            "tau = step * eta^2 * {c_time} ({} against flow coefficient {coefficient})",
            match rule {
                StepRule::NormalizedGd => "normalized GD",
                _ => "GD on sqrt L",
            }
        );
        Ok(TimeScaling { eta, c_time, convention })
    }

    pub fn step_for(&self, tau: f64) -> u64 {
        // Guard against tau / (eta^2 c) landing a rounding error below an integer.
        (tau / (self.eta * self.eta * self.c_time) * (1.0 + 1e-12)).floor() as u64
    }

    pub fn tau_of(&self, step: u64) -> f64 {
        step as f64 * self.eta * self.eta * self.c_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonSample {
    pub tau: f64,
    pub gd_step: u64,
    pub flow_point: ParamVector,
    pub phi_point: Option<ParamVector>,
    /// `|Phi(x_t) - X(tau)|`.
    pub distance: Option<f64>,
    /// `distance / |X(tau)|`.
    pub relative: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub scaling: TimeScaling,
    pub samples: Vec<ComparisonSample>,
    pub max_distance: Option<f64>,
    pub invalid_samples: usize,
}

/// Flow point at `tau` by linear interpolation between neighbouring states.
pub fn flow_at(flow: &[FlowState], tau: f64) -> Option<ParamVector> {
    let first = flow.first()?;
    if tau <= first.tau {
        return Some(first.x.clone());
    }
    let i = flow.partition_point(|s| s.tau < tau);
    if i >= flow.len() {
        let last = flow.last()?;
        return (tau - last.tau <= 1e-12 * (1.0 + tau)).then(|| last.x.clone());
    }
    let (a, b) = (&flow[i - 1], &flow[i]);
    let w = (tau - a.tau) / (b.tau - a.tau);
    Some(&a.x * (1.0 - w) + &b.x * w)
}

/// Compares `Phi(x_t)` with the flow point `X(tau)` for `tau` in `taus`, where `t`
/// is the optimizer step mapped by `scaling`. Samples whose step is missing from
/// the trace or whose `Phi` estimate fails are marked invalid.
pub fn compare_trajectories(
    flow: &[FlowState],
    gd: &[TraceRecord],
    model: &dyn LossModel,
    scaling: &TimeScaling,
    taus: &[f64],
    phi_cfg: &PhiConfig,
) -> ComparisonReport {
    let samples: Vec<ComparisonSample> = taus
        .par_iter()
        .map(|&tau| {
            let gd_step = scaling.step_for(tau);
            let mut sample =
                ComparisonSample { tau, gd_step, flow_point: ParamVector::zeros(0), phi_point: None, distance: None, relative: None, error: None };
            let Some(target) = flow_at(flow, tau) else {
                sample.error = Some("flow trace does not reach tau".into());
                return sample;
            };
            sample.flow_point = target.clone();
            let Some(rec) = gd.get(gd_step as usize).filter(|r| r.step == gd_step).or_else(|| gd.iter().find(|r| r.step == gd_step)) else {
                sample.error = Some(format!("step {gd_step} missing from optimizer trace"));
                return sample;
            };
            match estimate_phi(model, &rec.x, phi_cfg) {
                Ok(phi) => {
                    let d = (&phi.phi - &target).norm();
                    sample.distance = Some(d);
                    sample.relative = Some(d / target.norm());
                    if !phi.converged {
                        sample.error = Some("phi did not converge".into());
                    }
                    sample.phi_point = Some(phi.phi);
                }
                Err(e) => sample.error = Some(format!("phi: {e}")),
            }
            sample
        })
        .collect();
    let invalid_samples = samples.iter().filter(|s| s.distance.is_none()).count();
    let max_distance = samples.iter().filter_map(|s| s.distance).reduce(f64::max);
    ComparisonReport { scaling: scaling.clone(), samples, max_distance, invalid_samples }
}
