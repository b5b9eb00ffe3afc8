//! Experiment configuration: a TOML file with one table per concern.
//!
//! Every table and key is optional; defaults reproduce the toy-loss setup.
//! The full schema is documented in the repository README.

use std::ops::Range;
use std::path::PathBuf;

use eos_core::limiting_flow::{FlowConfig, FlowKind, ProjectionConfig};
use eos_core::loss_zoo::{
    mlp_regression_loss, quadratic_loss, toy_product_loss, Activation, Dataset, LossModel, QuadraticSpec,
};
use eos_core::manifold::{PhiConfig, ProjectionMethod};
use eos_core::optimizers::{gd_step, DiagConfig, OptimizerKind, Perturbation, StepRule};
use eos_core::ParamVector;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub quadratic: QuadraticSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Toy,
    Quadratic,
    Mlp,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_loss_kind")]
    pub kind: LossKind,
    /// Starting point for the toy and quadratic losses.
    pub x0: Option<Vec<f64>>,
    /// Diagonal quadratic.
    pub eigenvalues: Option<Vec<f64>>,
    /// Dense symmetric quadratic, row by row.
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
    #[serde(default = "default_one")]
    pub init_scale: f64,
    /// GD learning rate used to pre-train the MLP before the experiment starts.
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_pretrain_loss")]
    pub pretrain_loss: f64,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_max_steps: u64,
}

impl Default for LossSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Gd,
    Ngd,
    SqrtGd,
}

impl From<RuleName> for StepRule {
    fn from(r: RuleName) -> Self {
        match r {
            RuleName::Gd => StepRule::Gd,
            RuleName::Ngd => StepRule::NormalizedGd,
            RuleName::SqrtGd => StepRule::SqrtLossGd,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_rule")]
    pub rule: RuleName,
    #[serde(default = "default_eta")]
    pub eta: Spanned<f64>,
    #[serde(default = "default_steps")]
    pub steps: Spanned<u64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub enabled: bool,
    /// Defaults to `ceil(eta^-0.1)`.
    pub t_freq: Option<Spanned<u64>>,
    /// Defaults to `1e-8 eta`.
    pub radius: Option<f64>,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_every")]
    pub every: Spanned<u64>,
    #[serde(default = "default_true")]
    pub manifold: bool,
    #[serde(default = "default_true")]
    pub stableness: bool,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    pub tol_phi: Option<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// First step of the stableness-scan window.
    #[serde(default)]
    pub window_start: u64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowName {
    Log,
    Plain,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default = "default_flow")]
    pub kind: FlowName,
    #[serde(default = "default_eta_flow")]
    pub eta_flow: Spanned<f64>,
    /// Defaults to 1/4 for the log flow and 1/8 for the plain flow.
    pub coefficient: Option<f64>,
    #[serde(default = "default_one")]
    pub tau_end: f64,
    pub method: Option<ProjectionMethod>,
    #[serde(default = "default_eta_proj")]
    pub eta_proj: f64,
    #[serde(default = "default_t_proj")]
    pub t_proj: usize,
    #[serde(default = "default_tol_manifold")]
    pub tol_manifold: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Number of evenly spaced flow times in `[0, tau_end]`.
    #[serde(default = "default_compare_samples")]
    pub samples: usize,
    /// With `--check`, fail when the largest distance exceeds this.
    pub max_distance: Option<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSection {
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_quad_steps")]
    pub steps: usize,
    #[serde(default = "default_cycle_steps")]
    pub cycle_steps: usize,
}

impl Default for QuadraticSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

fn default_loss_kind() -> LossKind {
    LossKind::Toy
}
fn default_widths() -> Vec<usize> {
    vec![2, 8, 1]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_samples() -> usize {
    16
}
fn default_data_seed() -> u64 {
    7
}
fn default_init_seed() -> u64 {
    3
}
fn default_one() -> f64 {
    1.0
}
fn default_pretrain_lr() -> f64 {
    0.1
}
fn default_pretrain_loss() -> f64 {
    1e-4
}
fn default_pretrain_steps() -> u64 {
    100_000
}
fn default_rule() -> RuleName {
    RuleName::Ngd
}
fn default_eta() -> Spanned<f64> {
    Spanned::new(0..0, 0.02)
}
fn default_steps() -> Spanned<u64> {
    Spanned::new(0..0, 10_000)
}
fn default_every() -> Spanned<u64> {
    Spanned::new(0..0, 100)
}
fn default_true() -> bool {
    true
}
fn default_grid_n() -> usize {
    eos_core::diagnostics::DEFAULT_GRID_N
}
fn default_k() -> usize {
    4
}
fn default_flow() -> FlowName {
    FlowName::Log
}
fn default_eta_flow() -> Spanned<f64> {
    Spanned::new(0..0, 1e-3)
}
fn default_eta_proj() -> f64 {
    1e-2
}
fn default_t_proj() -> usize {
    1000
}
fn default_tol_manifold() -> f64 {
    1e-10
}
fn default_compare_samples() -> usize {
    101
}
fn default_seeds() -> u64 {
    100
}
fn default_dim() -> usize {
    5
}
fn default_quad_steps() -> usize {
    3000
}
fn default_cycle_steps() -> usize {
    100_000
}

/// 1-based line of a byte offset, or `None` for defaulted values.
fn line_of(source: &str, span: &Range<usize>) -> Option<usize> {
    (span.end > 0).then(|| source[..span.start.min(source.len())].matches('\n').count() + 1)
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates `source`; `origin` names the file in error messages.
    pub fn parse(source: &str, origin: &str, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(source).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        cfg.apply(ov);
        cfg.validate(source, origin)?;
        Ok(cfg)
    }

    pub fn defaults(ov: &Overrides) -> Result<Self, CliError> {
        Self::parse("", "<defaults>", ov)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(eta) = ov.eta {
            self.optimizer.eta = Spanned::new(0..0, eta);
        }
        if let Some(steps) = ov.steps {
            self.optimizer.steps = Spanned::new(0..0, steps);
        }
        if let Some(dir) = &ov.out_dir {
            self.out_dir = Some(dir.clone());
        }
    }

    fn validate(&self, source: &str, origin: &str) -> Result<(), CliError> {
        let fail = |span: &Range<usize>, msg: String| {
            let at = line_of(source, span).map_or(String::new(), |l| format!(" (line {l})"));
            Err(CliError::Config(format!("{origin}{at}: {msg}")))
        };
        let eta = &self.optimizer.eta;
        if !(*eta.get_ref() > 0.0 && eta.get_ref().is_finite()) {
            return fail(&eta.span(), format!("optimizer.eta must be positive, got {}", eta.get_ref()));
        }
        if *self.optimizer.steps.get_ref() == 0 {
            return fail(&self.optimizer.steps.span(), "optimizer.steps must be at least 1".into());
        }
        if *self.diagnostics.every.get_ref() == 0 {
            return fail(&self.diagnostics.every.span(), "diagnostics.every must be at least 1".into());
        }
        if let Some(t) = &self.noise.t_freq {
            if *t.get_ref() == 0 {
                return fail(&t.span(), "noise.t_freq must be at least 1".into());
            }
        }
        let eta_flow = &self.flow.eta_flow;
        if !(*eta_flow.get_ref() > 0.0 && eta_flow.get_ref().is_finite()) {
            return fail(&eta_flow.span(), format!("flow.eta_flow must be positive, got {}", eta_flow.get_ref()));
        }
        if self.flow.tau_end.is_nan() || self.flow.tau_end < 0.0 {
            return Err(CliError::Config(format!("{origin}: flow.tau_end must be non-negative")));
        }
        if self.compare.samples < 2 {
            return Err(CliError::Config(format!("{origin}: compare.samples must be at least 2")));
        }
        Ok(())
    }

    pub fn rule(&self) -> StepRule {
        self.optimizer.rule.into()
    }

    pub fn eta(&self) -> f64 {
        *self.optimizer.eta.get_ref()
    }

    pub fn steps(&self) -> u64 {
        *self.optimizer.steps.get_ref()
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        let mut kind = OptimizerKind::new(self.rule(), self.eta());
        if self.noise.enabled {
            let mut p = Perturbation::default_for(self.eta(), self.noise.seed.unwrap_or(self.seed));
            if let Some(t) = &self.noise.t_freq {
                p.t_freq = *t.get_ref();
            }
            if let Some(r) = self.noise.radius {
                p.radius = r;
            }
            kind.perturbation = p;
        }
        kind
    }

    pub fn phi_config(&self) -> PhiConfig {
        PhiConfig { tol_phi: self.diagnostics.tol_phi, k: self.diagnostics.k, ..PhiConfig::default() }
    }

    pub fn diag_config(&self) -> DiagConfig {
        DiagConfig {
            every: *self.diagnostics.every.get_ref(),
            manifold: self.diagnostics.manifold,
            stableness: self.diagnostics.stableness,
            grid_n: self.diagnostics.grid_n,
            phi: self.phi_config(),
            ..DiagConfig::default()
        }
    }

    pub fn flow_kind(&self) -> FlowKind {
        match self.flow.kind {
            FlowName::Log => FlowKind::LogFlow,
            FlowName::Plain => FlowKind::PlainFlow,
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        let kind = self.flow_kind();
        let mut cfg = FlowConfig::new(kind, *self.flow.eta_flow.get_ref());
        if let Some(c) = self.flow.coefficient {
            cfg.coefficient = c;
        }
        cfg.proj = ProjectionConfig {
            method: self.flow.method,
            eta_proj: self.flow.eta_proj,
            t_proj: self.flow.t_proj,
            tol_manifold: self.flow.tol_manifold,
            k: self.diagnostics.k,
            ..ProjectionConfig::default()
        };
        cfg
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("eos-out"))
    }
}

/// The loss and its starting point. MLP starts are pre-trained by GD.
pub struct Problem {
    pub model: Box<dyn LossModel>,
    pub x0: ParamVector,
    pub pretrain_steps: u64,
}

impl LossSection {
    pub fn build(&self) -> Result<Problem, CliError> {
        let invalid = |e: eos_core::Error| CliError::Config(format!("loss: {e}"));
        let (model, x0): (Box<dyn LossModel>, ParamVector) = match self.kind {
            LossKind::Toy => {
                let x0 = self.x0.clone().unwrap_or_else(|| vec![1.0, 0.3]);
                (Box::new(toy_product_loss()), ParamVector::from_vec(x0))
            }
            LossKind::Quadratic => {
                let spec = match (&self.eigenvalues, &self.matrix) {
                    (Some(e), None) => QuadraticSpec::Diagonal(e.clone()),
                    (None, Some(m)) => QuadraticSpec::Dense(m.clone()),
                    _ => return Err(CliError::Config("loss: quadratic needs exactly one of eigenvalues or matrix".into())),
                };
                let model = quadratic_loss(&spec).map_err(invalid)?;
                let x0 = self.x0.clone().ok_or_else(|| CliError::Config("loss: quadratic needs x0".into()))?;
                (Box::new(model), ParamVector::from_vec(x0))
            }
            LossKind::Mlp => {
                let (n_in, n_out) = match (self.widths.first(), self.widths.last()) {
                    (Some(&a), Some(&b)) if self.widths.len() >= 2 => (a, b),
                    _ => return Err(CliError::Config("loss: widths needs at least two layers".into())),
                };
                let ds = Dataset::synthetic(self.samples, n_in, n_out, self.data_seed).map_err(invalid)?;
                let model = mlp_regression_loss(&self.widths, self.activation, ds).map_err(invalid)?;
                let x0 = match &self.x0 {
                    Some(x) => ParamVector::from_vec(x.clone()),
                    None => model.init_params(self.init_seed, self.init_scale),
                };
                (Box::new(model), x0)
            }
        };
        model.check_dim(&x0).map_err(invalid)?;
        let mut x = x0;
        let mut pretrain_steps = 0;
        if self.kind == LossKind::Mlp {
            while model.value(&x) > self.pretrain_loss && pretrain_steps < self.pretrain_max_steps {
                x = gd_step(model.as_ref(), &x, self.pretrain_lr).map_err(CliError::Numerical)?;
                pretrain_steps += 1;
            }
        }
        Ok(Problem { model, x0: x, pretrain_steps })
    }
}
