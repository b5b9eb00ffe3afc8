//! Discrete update rules (GD, normalized GD, GD on `sqrt L`), the perturbed
//! wrapper, and the run driver producing per-step trace records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{stableness, StablenessResult};
use crate::loss_zoo::LossModel;
use crate::manifold::{estimate_phi, observables, ManifoldObservables, PhiConfig, TildeKind};
use crate::spectral::{top_eigenpairs, PowerConfig};
use crate::{Error, ParamVector, Result, LOSS_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Gd,
    NormalizedGd,
    SqrtLossGd,
}

impl StepRule {
    pub fn tilde_kind(self) -> TildeKind {
        match self {
            StepRule::SqrtLossGd => TildeKind::SqrtLoss,
            _ => TildeKind::NormalizedGd,
        }
    }
}

/// Noise schedule: after update `t` (1-based), if `t % t_freq == 0`, a point drawn
/// uniformly from the ball of radius `radius` is added to the iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub enabled: bool,
    pub t_freq: u64,
    pub radius: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn disabled() -> Self {
        Perturbation { enabled: false, t_freq: 1, radius: 0.0, seed: 0 }
    }

    /// `radius = 1e-8 eta`, `t_freq = ceil(eta^-0.1)`.
    pub fn default_for(eta: f64, seed: u64) -> Self {
        Perturbation { enabled: true, t_freq: eta.powf(-0.1).ceil().max(1.0) as u64, radius: 1e-8 * eta, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerKind {
    pub rule: StepRule,
    pub eta: f64,
    pub perturbation: Perturbation,
}

impl OptimizerKind {
    pub fn new(rule: StepRule, eta: f64) -> Self {
        OptimizerKind { rule, eta, perturbation: Perturbation::disabled() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.eta)));
        }
        let p = &self.perturbation;
        if !(p.radius >= 0.0 && p.radius.is_finite()) {
            return Err(Error::Invalid(format!("noise radius must be non-negative, got {}", p.radius)));
        }
        if p.enabled && p.t_freq == 0 {
            return Err(Error::Invalid("t_freq must be at least 1".into()));
        }
        Ok(())
    }

    /// The effective learning rate applied to `grad L` at `x`.
    pub fn eta_effective(&self, loss: f64, grad_norm: f64) -> f64 {
        match self.rule {
            StepRule::Gd => self.eta,
            StepRule::NormalizedGd => self.eta / grad_norm,
            StepRule::SqrtLossGd => self.eta / (2.0 * loss.max(LOSS_FLOOR).sqrt()),
        }
    }
}

/// `x - eta grad L(x)`.
pub fn gd_step(model: &dyn LossModel, x: &ParamVector, eta: f64) -> Result<ParamVector> {
    model.check_dim(x)?;
    Ok(x - model.gradient(x) * eta)
}

/// `x - eta grad L / |grad L|`.
pub fn normalized_gd_step(model: &dyn LossModel, x: &ParamVector, eta: f64) -> Result<ParamVector> {
    model.check_dim(x)?;
    let g = model.gradient(x);
    let n = g.norm();
    if n <= LOSS_FLOOR {
        return Err(Error::UndefinedUpdate(format!("gradient norm {n:e} at a critical point")));
    }
    Ok(x - g * (eta / n))
}

/// `x - eta grad L / (2 sqrt L)`.
pub fn sqrt_loss_gd_step(model: &dyn LossModel, x: &ParamVector, eta: f64) -> Result<ParamVector> {
    model.check_dim(x)?;
    let l = model.value(x);
    if l <= LOSS_FLOOR {
        return Err(Error::UndefinedUpdate(format!("loss {l:e} at the floor")));
    }
    Ok(x - model.gradient(x) * (eta / (2.0 * l.sqrt())))
}

pub fn base_step(model: &dyn LossModel, rule: StepRule, x: &ParamVector, eta: f64) -> Result<ParamVector> {
    match rule {
        StepRule::Gd => gd_step(model, x, eta),
        StepRule::NormalizedGd => normalized_gd_step(model, x, eta),
        StepRule::SqrtLossGd => sqrt_loss_gd_step(model, x, eta),
    }
}

/// Uniform sample from the ball of radius `radius` in `dim` dimensions.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> ParamVector {
    loop {
        let dir = ParamVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = dir.norm();
        if n > 0.0 {
            let u: f64 = rng.random();
            return dir * (radius * u.powf(1.0 / dim as f64) / n);
        }
    }
}

/// Stateful stepper applying the base rule and the perturbation schedule.
#[derive(Debug, Clone)]
pub struct PerturbedStepper {
    kind: OptimizerKind,
    rng: ChaCha8Rng,
    t: u64,
}

impl PerturbedStepper {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(PerturbedStepper { kind, rng: ChaCha8Rng::seed_from_u64(kind.perturbation.seed), t: 0 })
    }

    /// Number of updates taken so far.
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Performs update `t + 1`; returns the new iterate and whether noise was added.
    pub fn step(&mut self, model: &dyn LossModel, x: &ParamVector) -> Result<(ParamVector, bool)> {
        let mut next = base_step(model, self.kind.rule, x, self.kind.eta)?;
        self.t += 1;
        let p = &self.kind.perturbation;
        let noisy = p.enabled && self.t.is_multiple_of(p.t_freq);
        if noisy && p.radius > 0.0 {
            next += sample_ball(&mut self.rng, x.len(), p.radius);
        }
        Ok((next, noisy))
    }
}

/// What is computed at diagnosed steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagConfig {
    /// Diagnose every `every` steps (step 0 included); 0 disables diagnostics.
    pub every: u64,
    /// Estimate `Phi` and the manifold observables.
    pub manifold: bool,
    /// Evaluate stableness along the gradient segment.
    pub stableness: bool,
    pub grid_n: usize,
    pub phi: PhiConfig,
    pub power: PowerConfig,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            every: 1,
            manifold: true,
            stableness: true,
            grid_n: crate::diagnostics::DEFAULT_GRID_N,
            phi: PhiConfig::default(),
            power: PowerConfig::default(),
        }
    }
}

impl DiagConfig {
    pub fn none() -> Self {
        DiagConfig { every: 0, ..DiagConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub lambda1_at_x: f64,
    pub alignment: Option<f64>,
    pub lambda1_at_phi: Option<f64>,
    pub phi: Option<ParamVector>,
    pub phi_converged: Option<bool>,
    pub dist_to_phi: Option<f64>,
    pub manifold: Option<ManifoldObservables>,
    pub stableness: Option<StablenessResult>,
    /// Set when part of the diagnostics could not be computed.
    pub error: Option<String>,
}

/// State after `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: u64,
    pub x: ParamVector,
    pub loss: f64,
    pub sqrt_loss: f64,
    pub grad_norm: f64,
    pub eta_effective: f64,
    pub diagnostics: Option<StepDiagnostics>,
    /// Whether noise was added by the update that produced this iterate.
    pub noise_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    /// The next update was undefined (critical point or zero loss).
    UndefinedUpdate { step: u64, reason: String },
    /// The update at `step` produced a non-finite iterate or loss.
    NonFinite { step: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub kind: OptimizerKind,
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

/// Diagnostics of `x` for the given update rule.
pub fn diagnose(model: &dyn LossModel, kind: &OptimizerKind, x: &ParamVector, diag: &DiagConfig) -> StepDiagnostics {
    let mut out = StepDiagnostics {
        lambda1_at_x: f64::NAN,
        alignment: None,
        lambda1_at_phi: None,
        phi: None,
        phi_converged: None,
        dist_to_phi: None,
        manifold: None,
        stableness: None,
        error: None,
    };
    let mut errors = Vec::new();
    match top_eigenpairs(model, x, 1, &diag.power) {
        Ok(info) => {
            out.lambda1_at_x = info.lambda1();
            let g = model.gradient(x);
            let gn2 = g.norm_squared();
            if gn2.sqrt() > LOSS_FLOOR && info.lambda1() > 0.0 {
                out.alignment = Some(g.dot(&model.hvp(x, &g)) / (info.lambda1() * gn2));
            }
        }
        Err(e) => errors.push(format!("spectral: {e}")),
    }
    if diag.manifold {
        match estimate_phi(model, x, &diag.phi) {
            Ok(phi) => {
                out.lambda1_at_phi = Some(phi.spectral.lambda1());
                out.dist_to_phi = Some((x - &phi.phi).norm());
                out.phi_converged = Some(phi.converged);
                match observables(model, x, kind.eta, &phi, kind.rule.tilde_kind(), &diag.power) {
                    Ok(obs) => out.manifold = Some(obs),
                    Err(e) => errors.push(format!("observables: {e}")),
                }
                out.phi = Some(phi.phi);
            }
            Err(e) => errors.push(format!("phi: {e}")),
        }
    }
    if diag.stableness {
        let l = model.value(x);
        let gn = model.gradient(x).norm();
        if gn > LOSS_FLOOR {
            match stableness(model, x, kind.eta_effective(l, gn), diag.grid_n, &diag.power) {
                Ok(s) => out.stableness = Some(s),
                Err(e) => errors.push(format!("stableness: {e}")),
            }
        }
    }
    if !errors.is_empty() {
        out.error = Some(errors.join("; "));
    }
    out
}

fn record(
    model: &dyn LossModel,
    kind: &OptimizerKind,
    step: u64,
    x: ParamVector,
    noise_applied: bool,
    diag: &DiagConfig,
) -> TraceRecord {
    let loss = model.value(&x);
    let grad_norm = model.gradient(&x).norm();
    let diagnostics = (diag.every > 0 && step.is_multiple_of(diag.every)).then(|| diagnose(model, kind, &x, diag));
    TraceRecord {
        step,
        sqrt_loss: loss.max(0.0).sqrt(),
        eta_effective: kind.eta_effective(loss, grad_norm),
        loss,
        grad_norm,
        diagnostics,
        noise_applied,
        x,
    }
}

/// Runs `steps` updates from `x0`, handing each record (step 0 included) to `sink`.
pub fn run_with(
    model: &dyn LossModel,
    kind: &OptimizerKind,
    x0: &ParamVector,
    steps: u64,
    diag: &DiagConfig,
    sink: &mut dyn FnMut(TraceRecord) -> Result<()>,
) -> Result<Termination> {
    if steps == 0 {
        return Err(Error::Invalid("steps must be at least 1".into()));
    }
    model.check_dim(x0)?;
    let mut stepper = PerturbedStepper::new(*kind)?;
    let mut x = x0.clone();
    sink(record(model, kind, 0, x.clone(), false, diag))?;
    for t in 1..=steps {
        let (next, noisy) = match stepper.step(model, &x) {
            Ok(v) => v,
            Err(Error::UndefinedUpdate(reason)) => return Ok(Termination::UndefinedUpdate { step: t, reason }),
            Err(e) => return Err(e),
        };
        if next.iter().any(|c| !c.is_finite()) || !model.value(&next).is_finite() {
            return Ok(Termination::NonFinite { step: t });
        }
        x = next;
        sink(record(model, kind, t, x.clone(), noisy, diag))?;
    }
    Ok(Termination::Completed)
}

/// Collecting form of [`run_with`].
pub fn run(model: &dyn LossModel, kind: &OptimizerKind, x0: &ParamVector, steps: u64, diag: &DiagConfig) -> Result<Trace> {
    let mut records = Vec::with_capacity(steps as usize + 1);
    let termination = run_with(model, kind, x0, steps, diag, &mut |r| {
        records.push(r);
        Ok(())
    })?;
    Ok(Trace { kind: *kind, records, termination })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_zoo::{quadratic_loss, toy_product_loss, QuadraticSpec};
    use nalgebra::dvector;

    fn quad() -> crate::loss_zoo::QuadraticLoss {
        quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap()
    }

    #[test]
    fn step_examples() {
        let q = quad();
        let x = dvector![1.0, 1.0];
        let gd = gd_step(&q, &x, 0.1).unwrap();
        assert!((gd - dvector![0.9, 0.96]).amax() < 1e-15);
        let n = 1.16f64.sqrt();
        let ngd = normalized_gd_step(&q, &x, 0.1).unwrap();
        assert!((&ngd - dvector![1.0 - 0.1 / n, 1.0 - 0.04 / n]).amax() < 1e-15);
        assert!((&ngd - dvector![0.9071523, 0.9628609]).amax() < 1e-7);
        let sq = sqrt_loss_gd_step(&q, &x, 0.1).unwrap();
        assert!((sq - dvector![0.9402386, 0.9760954]).amax() < 1e-7);
    }

    #[test]
    fn undefined_updates() {
        let q = quad();
        let z = dvector![0.0, 0.0];
        assert!(matches!(normalized_gd_step(&q, &z, 0.1), Err(Error::UndefinedUpdate(_))));
        assert!(matches!(sqrt_loss_gd_step(&q, &z, 0.1), Err(Error::UndefinedUpdate(_))));
        assert_eq!(gd_step(&q, &z, 0.1).unwrap(), z);
        let x = dvector![0.3, -0.7];
        for rule in [StepRule::Gd, StepRule::NormalizedGd, StepRule::SqrtLossGd] {
            assert_eq!(base_step(&q, rule, &x, 0.0).unwrap(), x);
        }
    }

    #[test]
    fn default_schedule() {
        let p = Perturbation::default_for(0.01, 3);
        assert_eq!(p.t_freq, 2);
        assert!((p.radius - 1e-10).abs() < 1e-25);
        assert_eq!(Perturbation::default_for(1.0, 0).t_freq, 1);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..6 {
            for _ in 0..200 {
                assert!(sample_ball(&mut rng, d, 0.5).norm() <= 0.5);
            }
        }
    }

    #[test]
    fn noise_count() {
        let q = quad();
        let mut kind = OptimizerKind::new(StepRule::Gd, 0.01);
        kind.perturbation = Perturbation { enabled: true, t_freq: 100, radius: 1e-8, seed: 9 };
        let trace = run(&q, &kind, &dvector![1.0, 1.0], 10_000, &DiagConfig::none()).unwrap();
        assert_eq!(trace.termination, Termination::Completed);
        assert_eq!(trace.records.iter().filter(|r| r.noise_applied).count(), 100);
    }

    #[test]
    fn zero_radius_matches_base() {
        let m = toy_product_loss();
        let base = OptimizerKind::new(StepRule::NormalizedGd, 0.05);
        let mut noisy = base;
        noisy.perturbation = Perturbation { enabled: true, t_freq: 1, radius: 0.0, seed: 4 };
        let a = run(&m, &base, &dvector![1.0, 0.3], 200, &DiagConfig::none()).unwrap();
        let b = run(&m, &noisy, &dvector![1.0, 0.3], 200, &DiagConfig::none()).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.x, rb.x);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let m = toy_product_loss();
        let mut kind = OptimizerKind::new(StepRule::NormalizedGd, 0.05);
        kind.perturbation = Perturbation { enabled: true, t_freq: 1, radius: 1e-8, seed: 11 };
        let diag = DiagConfig { every: 50, ..DiagConfig::default() };
        let a = run(&m, &kind, &dvector![1.0, 0.3], 200, &diag).unwrap();
        let b = run(&m, &kind, &dvector![1.0, 0.3], 200, &diag).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ngd_step_length() {
        let m = toy_product_loss();
        let kind = OptimizerKind::new(StepRule::NormalizedGd, 0.03);
        let trace = run(&m, &kind, &dvector![1.0, 0.3], 500, &DiagConfig::none()).unwrap();
        for w in trace.records.windows(2) {
            assert!(((&w[1].x - &w[0].x).norm() - 0.03).abs() < 1e-14);
        }
    }

    #[test]
    fn stepping_onto_minimizer_terminates() {
        let q = quad();
        // One normalized step of length 1 from (1, 0) lands exactly on the origin.
        let kind = OptimizerKind::new(StepRule::NormalizedGd, 1.0);
        let trace = run(&q, &kind, &dvector![1.0, 0.0], 5, &DiagConfig::none()).unwrap();
        assert_eq!(trace.records.len(), 2);
        assert!(matches!(trace.termination, Termination::UndefinedUpdate { step: 2, .. }));
    }

    #[test]
    fn divergence_is_reported() {
        let q = quad();
        let kind = OptimizerKind::new(StepRule::Gd, 1e300);
        let trace = run(&q, &kind, &dvector![1e10, 1e10], 5, &DiagConfig::none()).unwrap();
        assert!(matches!(trace.termination, Termination::NonFinite { .. }));
        assert!(trace.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn zero_steps_rejected() {
        let q = quad();
        let kind = OptimizerKind::new(StepRule::Gd, 0.1);
        assert!(run(&q, &kind, &dvector![1.0, 1.0], 0, &DiagConfig::none()).is_err());
        let bad = OptimizerKind::new(StepRule::Gd, -0.1);
        assert!(run(&q, &bad, &dvector![1.0, 1.0], 3, &DiagConfig::none()).is_err());
    }

    #[test]
    fn gd_descent_regime_monotone() {
        let q = quad();
        let kind = OptimizerKind::new(StepRule::Gd, 1.5);
        let trace = run(&q, &kind, &dvector![1.0, -2.0], 100, &DiagConfig::none()).unwrap();
        for w in trace.records.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn diagnosed_records() {
        let m = toy_product_loss();
        let kind = OptimizerKind::new(StepRule::NormalizedGd, 0.05);
        let diag = DiagConfig { every: 10, ..DiagConfig::default() };
        let trace = run(&m, &kind, &dvector![1.0, 0.3], 30, &diag).unwrap();
        for r in &trace.records {
            assert_eq!(r.diagnostics.is_some(), r.step % 10 == 0);
            if let Some(d) = &r.diagnostics {
                assert!(d.error.is_none(), "{:?}", d.error);
                let s = d.stableness.as_ref().unwrap();
                assert!(s.value >= s.lower_bound - 1e-8);
                assert_eq!(d.manifold.as_ref().unwrap().m, 1);
            }
        }
    }
}
