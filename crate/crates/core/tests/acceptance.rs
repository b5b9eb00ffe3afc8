//! Acceptance criteria, one test each. Every test prints a single
//! `ACCEPTANCE <n> PASS|FAIL` line before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use eos_core::diagnostics::{eos_two_step_report, DEFAULT_GRID_N};
use eos_core::limiting_flow::{integrate_flow, FlowConfig, FlowKind, TimeScaling};
use eos_core::loss_zoo::*;
use eos_core::manifold::{estimate_phi, observables, PhiConfig, TildeKind};
use eos_core::optimizers::*;
use eos_core::quadratic_lab::*;
use eos_core::spectral::{grad_top_eigenvalue, top_eigenpairs, PowerConfig};
use eos_core::ParamVector;
use nalgebra::dvector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Written straight to stderr so the line shows without `--nocapture`.
fn report(n: u32, pass: bool, detail: String) {
    let line = format!("ACCEPTANCE {n:>2} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn sci(v: &[Option<f64>]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.map_or("n/a".into(), |x| format!("{x:.3e}"))).collect();
    format!("[{}]", parts.join(", "))
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

/// Root of `ln X + X^2 / 2 = c` on `(0, inf)` by bisection.
fn log_flow_oracle(c: f64) -> f64 {
    let f = |x: f64| x.ln() + 0.5 * x * x - c;
    let (mut lo, mut hi) = (1e-12, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

const Q_LAMBDAS: [f64; 2] = [1.0, 0.4];

fn quadratic_run() -> &'static Vec<ParamVector> {
    static RUN: OnceLock<Vec<ParamVector>> = OnceLock::new();
    RUN.get_or_init(|| tilde_trajectory(&Q_LAMBDAS, &dvector![1e-4, 0.45], 10_000).unwrap())
}

#[test]
fn criterion_01_quadratic_alignment() {
    let t0 = Instant::now();
    let traj = quadratic_run();
    let elapsed = t0.elapsed();
    let end = traj.len() - 1;
    assert_eq!(end, 10_000);
    let angle = angle_to_v1(&traj[end]);
    let pair_defect = (traj[end - 2].norm() + traj[end - 1].norm() - Q_LAMBDAS[0]).abs();
    let pass = angle <= 1e-6 && pair_defect <= 1e-8 && elapsed < Duration::from_secs(1);
    report(1, pass, format!("angle {angle:.3e}, two-step norm defect {pair_defect:.3e}, {elapsed:?}"));
    assert!(pass);
}

#[test]
fn criterion_02_loss_oscillation_limits() {
    let traj = quadratic_run();
    let cycle = detect_limit_cycle(&Q_LAMBDAS, &traj[0], 10_000, 1e-13).unwrap();
    let eta = 0.1;
    let l1 = Q_LAMBDAS[0];
    let end = traj.len() - 1;
    let (even, odd) = (&traj[end - 2], &traj[end - 1]);
    let c = cycle.c;
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs();
    let e_even = rel(quadratic_loss_of_tilde(&Q_LAMBDAS, even, eta), 0.5 * c * c * l1 * eta * eta);
    let e_odd = rel(quadratic_loss_of_tilde(&Q_LAMBDAS, odd, eta), 0.5 * (c - 1.0).powi(2) * l1 * eta * eta);
    let pass = cycle.converged && e_even <= 1e-6 && e_odd <= 1e-6;
    report(2, pass, format!("C {c:.9}, s {}, rel err even {e_even:.3e} odd {e_odd:.3e}", cycle.s));
    assert!(pass);
}

fn suite() -> &'static (QuadSuiteReport, Duration) {
    static SUITE: OnceLock<(QuadSuiteReport, Duration)> = OnceLock::new();
    SUITE.get_or_init(|| {
        let t0 = Instant::now();
        let r = run_suite(100, 5, 3000, 100_000).unwrap();
        (r, t0.elapsed())
    })
}

#[test]
fn criterion_03_invariant_set_entry() {
    let (r, elapsed) = suite();
    let failing: Vec<_> = r.instances.iter().filter(|o| !o.set_entry).collect();
    let composed_failing = r.instances.iter().filter(|o| !o.set_entry_composed).count();
    let first = failing.first().map(|o| format!("seed {} {:?}", o.seed, o.invariant.first_violation)).unwrap_or_default();
    let pass = r.set_entry && *elapsed < Duration::from_secs(10);
    report(
        3,
        pass,
        format!(
            "{} of 100 instances violate the entry bound {first}; composed bound violations {composed_failing}; {elapsed:?}",
            failing.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_norm_drop_and_monotone_alignment() {
    let (r, _) = suite();
    let count = |f: fn(&InstanceOutcome) -> usize| r.instances.iter().map(f).sum::<usize>();
    let drop = count(|o| o.alignment.norm_drop_violations);
    let local = count(|o| o.alignment.local_monotone_violations);
    let global = count(|o| o.alignment.global_monotone_violations);
    let skipped = r.instances.iter().filter(|o| o.alignment.hypothesis_failed).count();
    let pass = r.global_monotone && r.norm_drop && r.local_monotone;
    report(4, pass, format!("violations: norm drop {drop}, local {local}, global {global}; skipped {skipped}"));
    assert!(pass);
}

#[test]
fn criterion_05_sqrt_quadratic_equivalence() {
    let worst = [dvector![1.0, 1.0], dvector![-0.3, 2.0], dvector![0.05, -0.7]]
        .iter()
        .map(|x0| sqrt_quadratic_equivalence(&Q_LAMBDAS, x0, 0.1, 1000).unwrap())
        .fold(0.0, f64::max);
    let pass = worst <= 1e-10;
    report(5, pass, format!("max mapped distance over 1000 steps {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_06_limiting_flow_closed_forms() {
    let m = toy_product_loss();
    let t0 = Instant::now();
    let log = integrate_flow(&m, &dvector![1.0, 0.0], 1.0, &FlowConfig::new(FlowKind::LogFlow, 1e-4)).unwrap();
    let plain = integrate_flow(&m, &dvector![1.0, 0.0], 1.0, &FlowConfig::new(FlowKind::PlainFlow, 1e-4)).unwrap();
    let elapsed = t0.elapsed();
    let log_end = log.last().unwrap();
    let plain_end = plain.last().unwrap();
    let identity = log.iter().map(|s| (s.x[0].ln() + 0.5 * s.x[0] * s.x[0] - (0.5 - 0.5 * s.tau)).abs()).fold(0.0, f64::max);
    let log_err = (log_end.x[0] - log_flow_oracle(0.0)).abs();
    let plain_err = (plain_end.x[0] - (-0.5f64).exp()).abs();
    let pass = (log_end.tau - 1.0).abs() < 1e-9
        && (plain_end.tau - 1.0).abs() < 1e-9
        && log_err <= 1e-4
        && plain_err <= 1e-4
        && identity <= 1e-4
        && elapsed < Duration::from_secs(5);
    report(
        6,
        pass,
        format!(
            "log X(1) {:.7} err {log_err:.2e}, identity residual {identity:.2e}; plain X(1) {:.7} err {plain_err:.2e}; {elapsed:?}",
            log_end.x[0], plain_end.x[0]
        ),
    );
    assert!(pass);
}

const PHASE_ETAS: [f64; 3] = [0.04, 0.02, 0.01];
/// End of the Phase-I window, in units of `eta * t`.
const PHASE_ONE_END: f64 = 2.0;

struct PhaseRun {
    eta: f64,
    trace: Trace,
}

fn phase_runs() -> &'static (Vec<PhaseRun>, Duration) {
    static RUNS: OnceLock<(Vec<PhaseRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let m = toy_product_loss();
        let runs = PHASE_ETAS
            .par_iter()
            .map(|&eta| {
                let mut kind = OptimizerKind::new(StepRule::NormalizedGd, eta);
                kind.perturbation = Perturbation::default_for(eta, 1);
                let scaling = TimeScaling::new(StepRule::NormalizedGd, eta, 1.0).unwrap();
                let steps = scaling.step_for(1.0);
                let trace = run(&m, &kind, &dvector![1.0, 0.3], steps, &DiagConfig::none()).unwrap();
                PhaseRun { eta, trace }
            })
            .collect();
        (runs, t0.elapsed())
    })
}

#[test]
fn criterion_07_phase_two_tracking_rate() {
    let m = toy_product_loss();
    let (runs, run_time) = phase_runs();
    let t0 = Instant::now();
    let cfg = PhiConfig::default();
    let x0 = estimate_phi(&m, &dvector![1.0, 0.3], &cfg).unwrap().phi[0];
    let c0 = x0.ln() + 0.5 * x0 * x0;
    let mut convention = String::new();
    let errors: Vec<Option<f64>> = runs
        .iter()
        .map(|r| {
            let scaling = TimeScaling::new(StepRule::NormalizedGd, r.eta, 1.0).unwrap();
            convention = scaling.convention.clone();
            (0..=400)
                .into_par_iter()
                .map(|i| {
                    let tau = i as f64 / 400.0;
                    let rec = r.trace.records.get(scaling.step_for(tau) as usize)?;
                    let phi = estimate_phi(&m, &rec.x, &cfg).ok().filter(|p| p.converged)?;
                    Some((phi.phi[0] - log_flow_oracle(c0 - 2.0 * tau)).abs())
                })
                .collect::<Option<Vec<f64>>>()
                .map(|d| d.into_iter().fold(0.0, f64::max))
        })
        .collect();
    let elapsed = *run_time + t0.elapsed();
    let finite = errors.iter().all(|e| e.is_some_and(f64::is_finite));
    let ratios: Vec<f64> = errors.windows(2).filter_map(|w| Some(w[1]? / w[0]?)).collect();
    let pass = finite
        && completed(runs)
        && ratios.len() == 2
        && ratios.iter().all(|&q| in_range(q, 0.25, 0.75))
        && elapsed < Duration::from_secs(60);
    report(7, pass, format!("max |dX| {}, halving ratios {ratios:.3?}, time map: {convention}; {elapsed:?}", sci(&errors)));
    assert!(pass);
}

fn completed(runs: &[PhaseRun]) -> bool {
    runs.iter().all(|r| r.trace.termination == Termination::Completed)
}

#[test]
fn criterion_08_phase_one_r_scaling() {
    let m = toy_product_loss();
    let (runs, _) = phase_runs();
    let cfg = PhiConfig::default();
    let power = PowerConfig::default();
    let maxima: Vec<Option<f64>> = runs
        .iter()
        .map(|r| {
            let first = (PHASE_ONE_END / r.eta).ceil() as usize;
            let last = r.trace.records.len() - 1;
            (0..=200)
                .into_par_iter()
                .map(|i| {
                    let rec = &r.trace.records[first + (last - first) * i / 200];
                    let phi = estimate_phi(&m, &rec.x, &cfg).ok().filter(|p| p.converged)?;
                    let obs = observables(&m, &rec.x, r.eta, &phi, TildeKind::NormalizedGd, &power).ok()?;
                    obs.r.iter().copied().reduce(f64::max)
                })
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.into_iter().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect();
    let positive: Vec<Option<f64>> = maxima.iter().map(|m| m.map(|v| v.max(0.0))).collect();
    let ratios: Vec<f64> = positive.windows(2).filter_map(|w| Some(w[1]? / w[0]?)).collect();
    let pass = maxima.iter().all(Option::is_some) && ratios.len() == 2 && ratios.iter().all(|&q| in_range(q, 0.15, 0.6));
    report(8, pass, format!("max_j R_j after eta t >= {PHASE_ONE_END}: {}, halving ratios of R+ {ratios:?}", sci(&maxima)));
    assert!(pass);
}

/// Two-step report over steps `[100, 2100)` at `eta = 0.02` on the toy loss.
fn eos_window(rule: StepRule) -> Vec<eos_core::diagnostics::EosPairRecord> {
    let m = toy_product_loss();
    let eta = 0.02;
    let start = (PHASE_ONE_END / eta).round() as u64;
    let kind = OptimizerKind::new(rule, eta);
    let diag = DiagConfig { every: 1, manifold: false, stableness: rule == StepRule::NormalizedGd, ..DiagConfig::default() };
    let trace = run(&m, &kind, &dvector![1.0, 0.3], start + 2000, &diag).unwrap();
    assert_eq!(trace.termination, Termination::Completed);
    eos_two_step_report(&m, &trace, eta, DEFAULT_GRID_N, &PowerConfig::default())
        .unwrap()
        .into_iter()
        .filter(|p| p.step >= start)
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[test]
fn criterion_09_ngd_eos_identities() {
    let pairs = eos_window(StepRule::NormalizedGd);
    let inv = mean(pairs.iter().map(|p| p.inv_stableness_sum.unwrap()));
    let ratio = mean(pairs.iter().map(|p| p.ngd_ratio));
    let pass = pairs.len() == 2000 && in_range(inv, 0.9, 1.1) && in_range(ratio, 0.9, 1.1);
    report(9, pass, format!("{} pairs: mean inverse-stableness sum {inv:.5}, mean sqrt-loss ratio {ratio:.5}", pairs.len()));
    assert!(pass);
}

#[test]
fn criterion_10_sqrt_loss_eos_identity() {
    let pairs = eos_window(StepRule::SqrtLossGd);
    let ratio = mean(pairs.iter().map(|p| p.sqrt_ratio));
    let flagged = pairs.iter().filter(|p| p.sqrt_stableness.as_ref().is_some_and(|s| s.diverged)).count() as f64 / pairs.len() as f64;
    let pass = pairs.len() == 2000 && in_range(ratio, 0.9, 1.1) && flagged >= 0.9;
    report(10, pass, format!("{} pairs: mean (sqrt L_t + sqrt L_t+1)/(eta lambda_1) {ratio:.5}, divergence flagged {:.1}%", pairs.len(), 100.0 * flagged));
    assert!(pass);
}

#[test]
fn criterion_11_oracle_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models: Vec<Box<dyn LossModel>> = vec![
        Box::new(quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap()),
        Box::new(quadratic_loss(&QuadraticSpec::Dense(vec![vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.2], vec![0.0, 0.2, 0.3]])).unwrap()),
        Box::new(toy_product_loss()),
        Box::new(mlp_regression_loss(&[2, 8, 1], Activation::Tanh, Dataset::synthetic(16, 2, 1, 7).unwrap()).unwrap()),
        Box::new(mlp_regression_loss(&[3, 4, 2], Activation::Silu, Dataset::synthetic(6, 3, 2, 5).unwrap()).unwrap()),
    ];
    let mut worst_fd: f64 = 0.0;
    for m in &models {
        for _ in 0..10 {
            let x = ParamVector::from_fn(m.dim(), |_, _| rng.random_range(-1.5..1.5));
            let r = finite_diff_check(m.as_ref(), &x, FdTolerances::default());
            assert!(!r.non_finite);
            worst_fd = worst_fd.max(r.gradient_error).max(r.hvp_error);
        }
    }
    let toy = toy_product_loss();
    let power = PowerConfig::default();
    let lambda1 = |p: &ParamVector| top_eigenpairs(&toy, p, 1, &power).unwrap().lambda1();
    let mut worst_eig: f64 = 0.0;
    for a in [-1.5, -0.2, 0.2, 0.7, 2.0] {
        let x = dvector![a, 0.0];
        let info = top_eigenpairs(&toy, &x, 1, &power).unwrap();
        let g = grad_top_eigenvalue(&toy, &x, &info).unwrap().gradient;
        let h = 1e-5;
        let fd = ParamVector::from_fn(2, |j, _| {
            let mut e = ParamVector::zeros(2);
            e[j] = h;
            (lambda1(&(&x + &e)) - lambda1(&(&x - &e))) / (2.0 * h)
        });
        worst_eig = worst_eig.max((&g - &fd).norm() / g.norm());
    }
    let pass = worst_fd <= 1e-5 && worst_eig <= 1e-3;
    report(11, pass, format!("worst finite-difference rel err {worst_fd:.2e}; top-eigenvalue gradient rel err {worst_eig:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_12_mlp_substitute() {
    let t0 = Instant::now();
    let ds = Dataset::synthetic(16, 2, 1, 7).unwrap();
    let mlp = mlp_regression_loss(&[2, 8, 1], Activation::Tanh, ds).unwrap();
    let mut p = mlp.init_params(3, 1.0);
    let mut pre = 0;
    while mlp.value(&p) > 1e-4 && pre < 100_000 {
        p = gd_step(&mlp, &p, 0.1).unwrap();
        pre += 1;
    }
    let pretrained = mlp.value(&p) <= 1e-4;
    let eta = 0.05;
    let steps = 20_000;
    let kind = OptimizerKind::new(StepRule::NormalizedGd, eta);
    let diag = DiagConfig { every: 50, manifold: false, stableness: false, ..DiagConfig::default() };
    let trace = run(&mlp, &kind, &p, steps, &diag).unwrap();
    let final_quarter: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.step >= 3 * steps / 4)
        .filter_map(|r| r.diagnostics.as_ref())
        .map(|d| d.alignment.unwrap_or(f64::NAN))
        .collect();
    let aligned = final_quarter.iter().filter(|&&a| a > 0.9).count() as f64 / final_quarter.len() as f64;
    // The normal spectrum reaches ~5e-4, so Phi is resolved to |grad L| <= 1e-6.
    let cfg = PhiConfig { tol_phi: Some(1e-6), k: 20, ..PhiConfig::default() };
    let start = (PHASE_ONE_END / eta).round() as usize;
    let phis: Vec<_> = [start, steps as usize].par_iter().map(|&s| estimate_phi(&mlp, &trace.records[s].x, &cfg).unwrap()).collect();
    let (l_start, l_end) = (phis[0].spectral.lambda1(), phis[1].spectral.lambda1());
    let elapsed = t0.elapsed();
    let pass = pretrained
        && trace.termination == Termination::Completed
        && phis.iter().all(|p| p.converged)
        && aligned >= 0.8
        && l_end <= 1.01 * l_start
        && elapsed < Duration::from_secs(300);
    report(
        12,
        pass,
        format!(
            "pretrain {pre} steps; alignment > 0.9 at {:.1}% of {} diagnosed steps; lambda_1 at Phi {l_start:.4} (step {start}) -> {l_end:.4} (step {steps}); {elapsed:?}",
            100.0 * aligned,
            final_quarter.len()
        ),
    );
    assert!(pass);
}
