use std::path::{Path, PathBuf};

use eos_core::diagnostics::eos_two_step_report;
use eos_core::limiting_flow::{compare_trajectories, integrate_flow, TimeScaling};
use eos_core::optimizers::{run, DiagConfig, StepRule, Termination, Trace};
use eos_core::quadratic_lab::run_suite;
use eos_core::spectral::PowerConfig;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{cell, ensure_dir, write_csv, write_trace, Summary, Table};
use crate::plot::{plot_columns, DEFAULT_COLUMNS};

/// Outcome of a subcommand: the summary written, plus whether the run itself
/// hit a numerical failure after its files were written.
pub struct Outcome {
    pub summary: Summary,
    pub numerical_failure: Option<String>,
}

impl From<Summary> for Outcome {
    fn from(summary: Summary) -> Self {
        Outcome { summary, numerical_failure: None }
    }
}

fn config_json(cfg: &ExperimentConfig) -> Option<serde_json::Value> {
    serde_json::to_value(cfg).ok()
}

fn finish(mut summary: Summary, dir: &Path, files: Vec<PathBuf>) -> Result<Summary, CliError> {
    summary.files = files;
    summary.write(dir)?;
    Ok(summary)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn in_band(v: Option<f64>, lo: f64, hi: f64) -> bool {
    v.is_some_and(|v| v >= lo && v <= hi)
}

/// End of the Phase-I window in steps, `ceil(2 / eta)`.
fn phase_two_start(eta: f64) -> u64 {
    (2.0 / eta).ceil() as u64
}

pub fn quadratic(cfg: &ExperimentConfig, seeds: Option<u64>) -> Result<Outcome, CliError> {
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    let q = &cfg.quadratic;
    let seeds = seeds.unwrap_or(q.seeds);
    let report = run_suite(seeds, q.dim, q.steps, q.cycle_steps)?;
    let path = dir.join("quadratic_instances.csv");
    let header: Vec<String> = [
        "seed",
        "set_entry",
        "set_entry_composed",
        "norm_drop",
        "local_monotone",
        "global_monotone",
        "limit_cycle",
        "cycle_c",
        "cycle_steps",
        "set_violations",
        "first_violation_step",
        "first_violation_set",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = report.instances.iter().map(|o| {
        let v = o.invariant.first_violation.as_ref();
        vec![
            o.seed.to_string(),
            o.set_entry.to_string(),
            o.set_entry_composed.to_string(),
            o.norm_drop.to_string(),
            o.local_monotone.to_string(),
            o.global_monotone.to_string(),
            o.limit_cycle.to_string(),
            cell(Some(o.cycle.c)),
            o.cycle.steps.to_string(),
            o.invariant.violations.to_string(),
            v.map_or(String::new(), |v| v.step.to_string()),
            v.map_or(String::new(), |v| v.index.to_string()),
        ]
    });
    write_csv(&path, &header, rows)?;
    let mut s = Summary::new("quadratic", config_json(cfg));
    s.check("set_entry", report.set_entry);
    s.check("norm_drop", report.norm_drop);
    s.check("local_monotone", report.local_monotone);
    s.check("global_monotone", report.global_monotone);
    s.check("limit_cycle", report.limit_cycle);
    s.results = json!({
        "seeds": seeds,
        "dim": q.dim,
        "set_entry_composed": report.set_entry_composed,
        "failing_seeds": report.instances.iter().filter(|o| !(o.set_entry && o.norm_drop && o.local_monotone
            && o.global_monotone && o.limit_cycle)).map(|o| o.seed).collect::<Vec<_>>(),
    });
    Ok(finish(s, &dir, vec![path])?.into())
}

fn termination_failure(trace: &Trace) -> Option<String> {
    match &trace.termination {
        Termination::NonFinite { step } => Some(format!("non-finite iterate at step {step}")),
        _ => None,
    }
}

/// `v_k <= 1.01 min_{j<k} v_j` for every `k`.
fn non_increasing_with_jitter(values: &[f64]) -> bool {
    let mut best = f64::INFINITY;
    values.iter().all(|&v| {
        let ok = v <= 1.01 * best || !best.is_finite();
        best = best.min(v);
        ok
    })
}

pub fn run_trace(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    let problem = cfg.loss.build()?;
    let kind = cfg.optimizer_kind();
    let trace = run(problem.model.as_ref(), &kind, &problem.x0, cfg.steps(), &cfg.diag_config())?;
    let path = dir.join("trace.csv");
    write_trace(&path, &trace.records)?;

    let diagnosed: Vec<_> = trace.records.iter().filter_map(|r| Some((r.step, r.diagnostics.as_ref()?))).collect();
    let mut s = Summary::new("run", config_json(cfg));
    s.check("completed", trace.termination == Termination::Completed);
    s.check("diagnostics_clean", diagnosed.iter().all(|(_, d)| d.error.is_none()));
    if cfg.diagnostics.stableness {
        s.check(
            "stableness_at_least_lower_bound",
            diagnosed
                .iter()
                .filter_map(|(_, d)| d.stableness.as_ref())
                .all(|st| st.value >= st.lower_bound - 1e-9 * (1.0 + st.lower_bound.abs())),
        );
    }
    if cfg.diagnostics.manifold && kind.rule != StepRule::Gd {
        let start = phase_two_start(kind.eta);
        let l: Vec<f64> = diagnosed.iter().filter(|(step, _)| *step >= start).filter_map(|(_, d)| d.lambda1_at_phi).collect();
        s.check("lambda1_at_phi_non_increasing", non_increasing_with_jitter(&l));
    }
    let last = trace.records.last().expect("initial record");
    s.results = json!({
        "termination": trace.termination,
        "records": trace.records.len(),
        "pretrain_steps": problem.pretrain_steps,
        "final_loss": last.loss,
        "final_grad_norm": last.grad_norm,
        "phase_two_start": phase_two_start(kind.eta),
    });
    let numerical_failure = termination_failure(&trace);
    Ok(Outcome { summary: finish(s, &dir, vec![path])?, numerical_failure })
}

pub fn flow(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    let problem = cfg.loss.build()?;
    let fc = cfg.flow_config();
    let states = integrate_flow(problem.model.as_ref(), &problem.x0, cfg.flow.tau_end, &fc)?;
    let dim = problem.x0.len();
    let mut header: Vec<String> = ["tau", "lambda1", "residual_grad_norm"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=dim).map(|i| format!("x_{i}")));
    header.push("warning".into());
    let rows = states.iter().map(|st| {
        let mut row = vec![cell(Some(st.tau)), cell(Some(st.lambda1)), cell(Some(st.residual_grad_norm))];
        row.extend(st.x.iter().map(|&v| cell(Some(v))));
        row.push(st.warning.clone().unwrap_or_default());
        row
    });
    let path = dir.join("flow.csv");
    write_csv(&path, &header, rows)?;
    let last = states.last().expect("initial state");
    let mut s = Summary::new("flow", config_json(cfg));
    s.check("reached_tau_end", (last.tau - cfg.flow.tau_end).abs() <= 1e-9 * (1.0 + cfg.flow.tau_end));
    s.check(
        "lambda1_non_increasing",
        states.windows(2).all(|w| w[1].lambda1 <= w[0].lambda1 * (1.0 + 1e-9) + 1e-12),
    );
    s.results = json!({
        "flow_kind": fc.kind,
        "coefficient": fc.coefficient,
        "eta_flow": fc.eta_flow,
        "states": states.len(),
        "lambda1_start": states[0].lambda1,
        "lambda1_end": last.lambda1,
        "warning": last.warning,
    });
    Ok(finish(s, &dir, vec![path])?.into())
}

pub fn compare(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    let kind = cfg.optimizer_kind();
    let fc = cfg.flow_config();
    if fc.kind.paired_rule() != kind.rule {
        return Err(CliError::Config(format!(
            "compare: flow kind {:?} pairs with {:?}, but optimizer.rule is {:?}",
            fc.kind,
            fc.kind.paired_rule(),
            kind.rule
        )));
    }
    let problem = cfg.loss.build()?;
    let model = problem.model.as_ref();
    let scaling = TimeScaling::new(kind.rule, kind.eta, fc.coefficient)?;
    let tau_end = cfg.flow.tau_end;
    let steps = scaling.step_for(tau_end).max(1);
    let trace = run(model, &kind, &problem.x0, steps, &DiagConfig::none())?;
    let flow = integrate_flow(model, &problem.x0, tau_end, &fc)?;
    let n = cfg.compare.samples;
    let taus: Vec<f64> = (0..n).map(|i| tau_end * i as f64 / (n - 1) as f64).collect();
    let report = compare_trajectories(&flow, &trace.records, model, &scaling, &taus, &cfg.phi_config());
    let header: Vec<String> = ["tau", "gd_step", "distance", "relative", "error"].iter().map(|s| s.to_string()).collect();
    let rows = report.samples.iter().map(|smp| {
        vec![cell(Some(smp.tau)), smp.gd_step.to_string(), cell(smp.distance), cell(smp.relative), smp.error.clone().unwrap_or_default()]
    });
    let path = dir.join("comparison.csv");
    write_csv(&path, &header, rows)?;
    let mut s = Summary::new("compare", config_json(cfg));
    s.check("all_samples_valid", report.invalid_samples == 0 && report.samples.iter().all(|x| x.error.is_none()));
    if let Some(limit) = cfg.compare.max_distance {
        s.check("max_distance_within_limit", report.max_distance.is_some_and(|d| d <= limit));
    }
    s.results = json!({
        "max_distance": report.max_distance,
        "invalid_samples": report.invalid_samples,
        "time_convention": report.scaling.convention,
        "c_time": report.scaling.c_time,
        "optimizer_steps": steps,
        "termination": trace.termination,
    });
    let numerical_failure = termination_failure(&trace);
    Ok(Outcome { summary: finish(s, &dir, vec![path])?, numerical_failure })
}

pub fn stableness_scan(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    let problem = cfg.loss.build()?;
    let model = problem.model.as_ref();
    let kind = cfg.optimizer_kind();
    let diag = DiagConfig { every: 1, manifold: false, stableness: true, ..cfg.diag_config() };
    let trace = run(model, &kind, &problem.x0, cfg.steps(), &diag)?;
    let start = cfg.diagnostics.window_start;
    let power = PowerConfig::default();

    let header: Vec<String> =
        ["step", "eta_effective", "lambda1_at_x", "stableness", "stableness_lb"].iter().map(|s| s.to_string()).collect();
    let rows = trace.records.iter().filter(|r| r.step >= start).map(|r| {
        let d = r.diagnostics.as_ref();
        let st = d.and_then(|d| d.stableness.as_ref());
        vec![
            r.step.to_string(),
            cell(r.eta_effective.is_finite().then_some(r.eta_effective)),
            cell(d.map(|d| d.lambda1_at_x).filter(|v| v.is_finite())),
            cell(st.map(|s| s.value)),
            cell(st.map(|s| s.lower_bound)),
        ]
    });
    let scan_path = dir.join("stableness.csv");
    write_csv(&scan_path, &header, rows)?;

    let pairs: Vec<_> =
        eos_two_step_report(model, &trace, kind.eta, cfg.diagnostics.grid_n, &power)?.into_iter().filter(|p| p.step >= start).collect();
    let header: Vec<String> = [
        "step",
        "lambda1",
        "sqrt_sum",
        "inv_stableness_sum",
        "ngd_ratio",
        "sqrt_ratio",
        "sqrt_stableness",
        "sqrt_stableness_diverged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = pairs.iter().map(|p| {
        let ss = p.sqrt_stableness.as_ref();
        vec![
            p.step.to_string(),
            cell(Some(p.lambda1)),
            cell(Some(p.sqrt_sum)),
            cell(p.inv_stableness_sum),
            cell(Some(p.ngd_ratio)),
            cell(Some(p.sqrt_ratio)),
            cell(ss.map(|s| s.value)),
            ss.map_or(String::new(), |s| s.diverged.to_string()),
        ]
    });
    let pairs_path = dir.join("eos_pairs.csv");
    write_csv(&pairs_path, &header, rows)?;

    let inv = mean(pairs.iter().filter_map(|p| p.inv_stableness_sum));
    let ngd = mean(pairs.iter().map(|p| p.ngd_ratio));
    let sqrt = mean(pairs.iter().map(|p| p.sqrt_ratio));
    let flagged = mean(pairs.iter().filter_map(|p| p.sqrt_stableness.as_ref()).map(|s| if s.diverged { 1.0 } else { 0.0 }));
    let mut s = Summary::new("stableness-scan", config_json(cfg));
    match kind.rule {
        StepRule::NormalizedGd => {
            s.check("mean_inv_stableness_sum_near_one", in_band(inv, 0.9, 1.1));
            s.check("mean_ngd_ratio_near_one", in_band(ngd, 0.9, 1.1));
        }
        StepRule::SqrtLossGd => {
            s.check("mean_sqrt_ratio_near_one", in_band(sqrt, 0.9, 1.1));
            s.check("sqrt_stableness_divergence_flagged", flagged.is_some_and(|f| f >= 0.9));
        }
        StepRule::Gd => {}
    }
    s.results = json!({
        "pairs": pairs.len(),
        "window_start": start,
        "mean_inv_stableness_sum": inv,
        "mean_ngd_ratio": ngd,
        "mean_sqrt_ratio": sqrt,
        "sqrt_divergence_fraction": flagged,
        "termination": trace.termination,
    });
    let numerical_failure = termination_failure(&trace);
    Ok(Outcome { summary: finish(s, &dir, vec![scan_path, pairs_path])?, numerical_failure })
}

pub fn plot(input: &Path, x_col: &str, columns: &[String], out_dir: &Path) -> Result<Outcome, CliError> {
    ensure_dir(out_dir)?;
    let table = Table::read(input)?;
    let columns: Vec<String> =
        if columns.is_empty() { DEFAULT_COLUMNS.iter().map(|s| s.to_string()).collect() } else { columns.to_vec() };
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let out = out_dir.join(format!("{stem}.svg"));
    plot_columns(&table, x_col, &columns, &out)?;
    let mut s = Summary::new("plot", None);
    s.results = json!({ "input": input, "x": x_col, "columns": columns });
    s.files = vec![out];
    Ok(s.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rule() {
        assert!(non_increasing_with_jitter(&[5.0, 4.0, 4.03, 3.9]));
        assert!(!non_increasing_with_jitter(&[5.0, 4.0, 4.1]));
        assert!(non_increasing_with_jitter(&[]));
    }

    #[test]
    fn band() {
        assert!(in_band(Some(1.0), 0.9, 1.1));
        assert!(!in_band(Some(0.5), 0.9, 1.1));
        assert!(!in_band(None, 0.9, 1.1));
    }
}
