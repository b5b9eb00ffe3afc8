//! Exact normalized-GD dynamics on quadratics in the eigenbasis, and checkers for
//! the limit-cycle, invariant-set and alignment properties.
//!
//! In the eigenbasis the state `x~` evolves by `x~_i <- x~_i (1 - lambda_i / |x~|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::loss_zoo::{quadratic_loss, QuadraticSpec};
use crate::optimizers::{sample_ball, sqrt_loss_gd_step};
use crate::{Error, ParamVector, Result, LOSS_FLOOR};

/// Absolute tolerance of the property checkers.
pub const PROPERTY_TOL: f64 = 1e-12;
/// `|<v1, x~>|` below this counts as a vanished top coordinate.
pub const HYPOTHESIS_EPS: f64 = 1e-14;

fn validate_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Invalid("empty spectrum".into()));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Invalid("eigenvalues must be positive and finite".into()));
    }
    if lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Invalid("eigenvalues must be sorted in decreasing order".into()));
    }
    if lambdas.len() > 1 && lambdas[0] <= lambdas[1] {
        return Err(Error::Invalid("no gap between the top two eigenvalues".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TildeState {
    lambdas: Vec<f64>,
    x: ParamVector,
}

impl TildeState {
    pub fn new(lambdas: Vec<f64>, x: ParamVector) -> Result<Self> {
        validate_lambdas(&lambdas)?;
        if x.len() != lambdas.len() {
            return Err(Error::DimensionMismatch { expected: lambdas.len(), got: x.len() });
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("tilde state".into()));
        }
        Ok(TildeState { lambdas, x })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn x(&self) -> &ParamVector {
        &self.x
    }
}

fn step_in_place(lambdas: &[f64], x: &mut ParamVector) -> Result<()> {
    let n = x.norm();
    if n <= LOSS_FLOOR {
        return Err(Error::UndefinedUpdate("tilde state at the origin".into()));
    }
    for (c, l) in x.iter_mut().zip(lambdas) {
        *c *= 1.0 - l / n;
    }
    Ok(())
}

/// One step `x~ - A x~ / |x~|`.
pub fn quadratic_tilde_step(state: &TildeState) -> Result<TildeState> {
    let mut x = state.x.clone();
    step_in_place(&state.lambdas, &mut x)?;
    Ok(TildeState { lambdas: state.lambdas.clone(), x })
}

/// `x~(0), ..., x~(steps)`; stops early (without error) if the update becomes undefined.
pub fn tilde_trajectory(lambdas: &[f64], x0: &ParamVector, steps: usize) -> Result<Vec<ParamVector>> {
    validate_lambdas(lambdas)?;
    if x0.len() != lambdas.len() {
        return Err(Error::DimensionMismatch { expected: lambdas.len(), got: x0.len() });
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    for _ in 0..steps {
        if step_in_place(lambdas, &mut x).is_err() {
            break;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Angle between `x` and the first coordinate axis.
pub fn angle_to_v1(x: &ParamVector) -> f64 {
    let rest = x.rows(1, x.len() - 1).norm();
    rest.atan2(x[0].abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCycleReport {
    /// `|x~(2t)| / lambda_1` at the last even step.
    pub c: f64,
    pub s: f64,
    /// `|x~(2t) - C s lambda_1 v1|`.
    pub residual_even: f64,
    /// `|x~(2t+1) - (C - 1) s lambda_1 v1|`.
    pub residual_odd: f64,
    /// `|x~(2t)| + |x~(2t+1)|`.
    pub two_step_norm_sum: f64,
    /// Angle between `x~(2t)` and `v1`.
    pub angle_even: f64,
    pub even: ParamVector,
    pub odd: ParamVector,
    pub steps: usize,
    pub converged: bool,
}

/// Iterates until both the even and odd subsequences move less than `tol` between
/// successive terms, then reads off the cycle `(C s lambda_1 v1, (C - 1) s lambda_1 v1)`.
pub fn detect_limit_cycle(lambdas: &[f64], x0: &ParamVector, max_steps: usize, tol: f64) -> Result<LimitCycleReport> {
    let state = TildeState::new(lambdas.to_vec(), x0.clone())?;
    if x0[0].abs() < HYPOTHESIS_EPS {
        return Err(Error::Invalid("the top-eigenvector component of the initial state is zero".into()));
    }
    let l1 = lambdas[0];
    let mut even = state.x;
    let mut odd = even.clone();
    step_in_place(lambdas, &mut odd)?;
    let mut steps = 1;
    let mut converged = false;
    while steps + 2 <= max_steps {
        let mut next_even = odd.clone();
        step_in_place(lambdas, &mut next_even)?;
        let mut next_odd = next_even.clone();
        step_in_place(lambdas, &mut next_odd)?;
        steps += 2;
        let moved = (&next_even - &even).norm().max((&next_odd - &odd).norm());
        even = next_even;
        odd = next_odd;
        if moved < tol {
            converged = true;
            break;
        }
    }
    let c = even.norm() / l1;
    let s = even[0].signum();
    let mut target = ParamVector::zeros(even.len());
    target[0] = c * s * l1;
    let residual_even = (&even - &target).norm();
    target[0] = (c - 1.0) * s * l1;
    let residual_odd = (&odd - &target).norm();
    Ok(LimitCycleReport {
        c,
        s,
        residual_even,
        residual_odd,
        two_step_norm_sum: even.norm() + odd.norm(),
        angle_even: angle_to_v1(&even),
        even,
        odd,
        steps,
        converged,
    })
}

/// `L(x) = (eta^2 / 2) x~^T A^{-1} x~` for `x = eta A^{-1} x~`.
pub fn quadratic_loss_of_tilde(lambdas: &[f64], x: &ParamVector, eta: f64) -> f64 {
    0.5 * eta * eta * x.iter().zip(lambdas).map(|(c, l)| c * c / l).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub step: usize,
    /// 1-based index of the set, eigenvalue, or lemma variant involved.
    pub index: usize,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantSetReport {
    /// Entry bound for each `j = 1..D`.
    pub entry_bounds: Vec<f64>,
    pub checks: usize,
    pub violations: usize,
    pub first_violation: Option<Violation>,
}

impl InvariantSetReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// `|Pi_j x~|` for `Pi_j` the projector onto coordinates `j..D` (0-based `j`).
fn tail_norm(x: &ParamVector, j: usize) -> f64 {
    x.iter().skip(j).map(|c| c * c).sum::<f64>().sqrt()
}

/// Which entry time into `I_j` the set checker uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryBound {
    /// `(l1/lj) ln(l1/lj) + max((|x~0| - l1)/lD, 0)`.
    Stated,
    /// `(l1/lD) ln(l1/lj) + ceil(max((|x~0| - l1)/lD, 0))`: the time to enter `I_1`
    /// plus a contraction of at least `lD/l1` per step inside it.
    Composed,
}

/// Entry time into `I_j` (0-based `j`) for start norm `norm0`.
pub fn entry_bound(lambdas: &[f64], j: usize, norm0: f64, kind: EntryBound) -> f64 {
    let l1 = lambdas[0];
    let ld = lambdas[lambdas.len() - 1];
    let r = l1 / lambdas[j];
    let first = ((norm0 - l1) / ld).max(0.0);
    match kind {
        EntryBound::Stated => r * r.ln() + first,
        EntryBound::Composed => (l1 / ld) * r.ln() + first.ceil(),
    }
}

/// Checks `|Pi_j x~(t)| <= lambda_j + 1e-12` for every `j` and every `t` past the
/// stated entry bound.
pub fn check_invariant_sets(lambdas: &[f64], trace: &[ParamVector]) -> Result<InvariantSetReport> {
    check_invariant_sets_with(lambdas, trace, EntryBound::Stated)
}

pub fn check_invariant_sets_with(lambdas: &[f64], trace: &[ParamVector], kind: EntryBound) -> Result<InvariantSetReport> {
    validate_lambdas(lambdas)?;
    let Some(first) = trace.first() else {
        return Err(Error::Invalid("empty trajectory".into()));
    };
    let norm0 = first.norm();
    let entry_bounds: Vec<f64> = (0..lambdas.len()).map(|j| entry_bound(lambdas, j, norm0, kind)).collect();
    let mut report = InvariantSetReport { entry_bounds, checks: 0, violations: 0, first_violation: None };
    for (t, x) in trace.iter().enumerate() {
        for (j, l) in lambdas.iter().enumerate() {
            if (t as f64) < report.entry_bounds[j] {
                continue;
            }
            report.checks += 1;
            let v = tail_norm(x, j);
            if v > l + PROPERTY_TOL {
                report.violations += 1;
                report.first_violation.get_or_insert(Violation { step: t, index: j + 1, value: v, bound: *l });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentLemmaReport {
    /// First step inside every `I_j`; `None` if never reached.
    pub start: Option<usize>,
    /// The top coordinate vanished, so the lemmas' hypothesis fails and nothing was checked.
    pub hypothesis_failed: bool,
    pub norm_drop_checks: usize,
    pub norm_drop_violations: usize,
    pub local_monotone_checks: usize,
    pub local_monotone_violations: usize,
    pub global_monotone_checks: usize,
    pub global_monotone_violations: usize,
    pub first_violation: Option<Violation>,
}

impl AlignmentLemmaReport {
    pub fn passed(&self) -> bool {
        self.norm_drop_violations + self.local_monotone_violations + self.global_monotone_violations == 0
    }
}

fn in_all_sets(lambdas: &[f64], x: &ParamVector) -> bool {
    lambdas.iter().enumerate().all(|(j, l)| tail_norm(x, j) <= l + PROPERTY_TOL)
}

/// From the first step inside every invariant set on:
/// the norm-drop bound `|x~(t+1)| <= max(l1/2 - lD^2/(2 l1), l1 - |x~(t)|)` when
/// `|x~(t)| > l1/2` (index 5 in violations); `|<v1,x~(t+k)>| >= |<v1,x~(t)>|`
/// for `k = 1, 2` when `|x~(t)| <= l1/2` (index 6); and monotonicity of
/// `|<v1,x~>|` over the steps with `|x~| <= l1/2` (index 4).
pub fn check_alignment_lemmas(lambdas: &[f64], trace: &[ParamVector]) -> Result<AlignmentLemmaReport> {
    validate_lambdas(lambdas)?;
    let l1 = lambdas[0];
    let ld = lambdas[lambdas.len() - 1];
    let start = trace.iter().position(|x| in_all_sets(lambdas, x));
    let mut r = AlignmentLemmaReport {
        start,
        hypothesis_failed: false,
        norm_drop_checks: 0,
        norm_drop_violations: 0,
        local_monotone_checks: 0,
        local_monotone_violations: 0,
        global_monotone_checks: 0,
        global_monotone_violations: 0,
        first_violation: None,
    };
    let Some(start) = start else { return Ok(r) };
    let tail = &trace[start..];
    if tail.iter().any(|x| x[0].abs() < HYPOTHESIS_EPS) {
        r.hypothesis_failed = true;
        return Ok(r);
    }
    let note = |r: &mut AlignmentLemmaReport, v: Violation| {
        r.first_violation.get_or_insert(v);
    };
    let mut last_small: Option<f64> = None;
    for (i, x) in tail.iter().enumerate() {
        let t = start + i;
        let n = x.norm();
        let g = x[0].abs();
        if n > 0.5 * l1 {
            if let Some(next) = tail.get(i + 1) {
                r.norm_drop_checks += 1;
                let bound = (0.5 * l1 - ld * ld / (2.0 * l1)).max(l1 - n);
                let v = next.norm();
                if v > bound + PROPERTY_TOL {
                    r.norm_drop_violations += 1;
                    note(&mut r, Violation { step: t, index: 5, value: v, bound });
                }
            }
        } else {
            for k in 1..=2 {
                if let Some(next) = tail.get(i + k) {
                    r.local_monotone_checks += 1;
                    if next[0].abs() < g - PROPERTY_TOL {
                        r.local_monotone_violations += 1;
                        note(&mut r, Violation { step: t, index: 6, value: next[0].abs(), bound: g });
                    }
                }
            }
            if let Some(prev) = last_small {
                r.global_monotone_checks += 1;
                if g < prev - PROPERTY_TOL {
                    r.global_monotone_violations += 1;
                    note(&mut r, Violation { step: t, index: 4, value: g, bound: prev });
                }
            }
            last_small = Some(g);
        }
    }
    Ok(r)
}

/// Runs GD on `sqrt L` for `L = x^T diag(lambdas) x / 2` from `x0` and the tilde map
/// from `(2A)^{1/2} x0 / eta`; returns the largest distance between the mapped GD
/// iterates and the tilde iterates, over steps where both are defined.
pub fn sqrt_quadratic_equivalence(lambdas: &[f64], x0: &ParamVector, eta: f64, steps: usize) -> Result<f64> {
    validate_lambdas(lambdas)?;
    let model = quadratic_loss(&QuadraticSpec::Diagonal(lambdas.to_vec()))?;
    let map = |x: &ParamVector| ParamVector::from_fn(x.len(), |i, _| (2.0 * lambdas[i]).sqrt() * x[i] / eta);
    let mut x = x0.clone();
    let mut tilde = map(x0);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let Ok(next) = sqrt_loss_gd_step(&model, &x, eta) else { break };
        if step_in_place(lambdas, &mut tilde).is_err() {
            break;
        }
        x = next;
        worst = worst.max((map(&x) - &tilde).norm());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadInstance {
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub x0: ParamVector,
}

/// Seeded instance: `dim` eigenvalues in `[0.2, 1]` with consecutive gaps of at
/// least 0.05, and `x~0` uniform in the ball of radius `max_norm`.
pub fn random_instance(seed: u64, dim: usize, max_norm: f64) -> Result<QuadInstance> {
    if dim == 0 || 0.05 * (dim - 1) as f64 > 0.8 {
        return Err(Error::Invalid(format!("cannot place {dim} separated eigenvalues in [0.2, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas = loop {
        let mut l: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..=1.0)).collect();
        l.sort_by(|a, b| b.total_cmp(a));
        if l.windows(2).all(|w| w[0] - w[1] >= 0.05) {
            break l;
        }
    };
    let x0 = loop {
        let x = sample_ball(&mut rng, dim, max_norm);
        if x[0].abs() >= HYPOTHESIS_EPS {
            break x;
        }
    };
    Ok(QuadInstance { seed, lambdas, x0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceOutcome {
    pub seed: u64,
    pub set_entry: bool,
    /// Set entry checked against [`EntryBound::Composed`].
    pub set_entry_composed: bool,
    pub global_monotone: bool,
    pub norm_drop: bool,
    pub local_monotone: bool,
    pub limit_cycle: bool,
    pub invariant: InvariantSetReport,
    pub invariant_composed: InvariantSetReport,
    pub alignment: AlignmentLemmaReport,
    pub cycle: LimitCycleReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadSuiteReport {
    pub set_entry: bool,
    pub set_entry_composed: bool,
    pub global_monotone: bool,
    pub norm_drop: bool,
    pub local_monotone: bool,
    pub limit_cycle: bool,
    pub instances: Vec<InstanceOutcome>,
}

impl QuadSuiteReport {
    pub fn passed(&self) -> bool {
        self.set_entry && self.global_monotone && self.norm_drop && self.local_monotone && self.limit_cycle
    }
}

/// Runs all checkers on `instance`: `steps` tilde steps for the set and lemma checks,
/// and a limit-cycle search of up to `cycle_steps` steps (converged, residuals and
/// two-step norm defect at most `1e-8`).
pub fn check_instance(instance: &QuadInstance, steps: usize, cycle_steps: usize) -> Result<InstanceOutcome> {
    let trace = tilde_trajectory(&instance.lambdas, &instance.x0, steps)?;
    let invariant = check_invariant_sets(&instance.lambdas, &trace)?;
    let invariant_composed = check_invariant_sets_with(&instance.lambdas, &trace, EntryBound::Composed)?;
    let alignment = check_alignment_lemmas(&instance.lambdas, &trace)?;
    let cycle = detect_limit_cycle(&instance.lambdas, &instance.x0, cycle_steps, 1e-13)?;
    let skip = alignment.hypothesis_failed;
    let cycle_ok = cycle.converged
        && cycle.c > 0.0
        && cycle.c < 1.0
        && cycle.residual_even <= 1e-8
        && cycle.residual_odd <= 1e-8
        && (cycle.two_step_norm_sum - instance.lambdas[0]).abs() <= 1e-8;
    Ok(InstanceOutcome {
        seed: instance.seed,
        set_entry: invariant.passed(),
        set_entry_composed: invariant_composed.passed(),
        global_monotone: skip || alignment.global_monotone_violations == 0,
        norm_drop: skip || alignment.norm_drop_violations == 0,
        local_monotone: skip || alignment.local_monotone_violations == 0,
        limit_cycle: cycle_ok,
        invariant,
        invariant_composed,
        alignment,
        cycle,
    })
}

/// `seeds` random instances of dimension `dim` (seeds `0..seeds`).
pub fn run_suite(seeds: u64, dim: usize, steps: usize, cycle_steps: usize) -> Result<QuadSuiteReport> {
    let instances = (0..seeds)
        .map(|seed| check_instance(&random_instance(seed, dim, 3.0)?, steps, cycle_steps))
        .collect::<Result<Vec<_>>>()?;
    let all = |f: fn(&InstanceOutcome) -> bool| instances.iter().all(f);
    Ok(QuadSuiteReport {
        set_entry: all(|o| o.set_entry),
        set_entry_composed: all(|o| o.set_entry_composed),
        global_monotone: all(|o| o.global_monotone),
        norm_drop: all(|o| o.norm_drop),
        local_monotone: all(|o| o.local_monotone),
        limit_cycle: all(|o| o.limit_cycle),
        instances,
    })
}
