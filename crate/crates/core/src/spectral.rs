//! Matrix-free eigen-analysis of the Hessian.
//!
//! Eigenpairs are extracted one at a time by power iteration on Hessian-vector
//! products, deflating the pairs already found. The dominant eigenvalue of the
//! (deflated) operator may be negative away from a minimizer; in that case the
//! iteration is rerun on the shifted operator `H - mu I`, whose dominant
//! eigenvalue is the largest algebraic one.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::loss_zoo::LossModel;
use crate::{Error, ParamVector, Result};

/// Default ratio `lambda_i / lambda_1` above which an eigenvalue counts toward the rank.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig { tol: 1e-10, max_iters: 10_000, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenPair {
    pub value: f64,
    pub vector: ParamVector,
    /// `|H v - lambda v|` at termination.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralInfo {
    /// Eigenpairs ordered by decreasing eigenvalue.
    pub pairs: Vec<EigenPair>,
    /// Number of eigenvalues at least `DEFAULT_RANK_THRESHOLD * lambda_1`.
    pub rank_estimate: usize,
    /// `lambda_1 - lambda_2`, or `+inf` when only one pair was computed.
    pub eigengap: f64,
    /// All pairs met the convergence test.
    pub converged: bool,
    /// `lambda_1 <= tol`: the Hessian is numerically zero.
    pub zero_hessian: bool,
    pub tol: f64,
}

impl SpectralInfo {
    pub fn lambda1(&self) -> f64 {
        self.pairs[0].value
    }

    pub fn v1(&self) -> &ParamVector {
        &self.pairs[0].vector
    }

    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.pairs.iter().map(|p| p.residual).fold(0.0, f64::max)
    }
}

/// Flips `v` so that its first entry with magnitude above `1e-12` is positive.
pub fn canonical_sign(v: &mut ParamVector) {
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> ParamVector {
    loop {
        let v = ParamVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 0.0 {
            return v / n;
        }
    }
}

fn orthogonalize(v: &mut ParamVector, basis: &[EigenPair]) {
    // Two passes of classical Gram-Schmidt.
    for _ in 0..2 {
        for p in basis {
            let c = p.vector.dot(v);
            v.axpy(-c, &p.vector, 1.0);
        }
    }
}

struct PowerOutcome {
    value: f64,
    vector: ParamVector,
    residual: f64,
    converged: bool,
}

/// Power iteration for the dominant (largest magnitude) eigenpair of
/// `op(v) - shift v`, restricted to the orthogonal complement of `found`.
fn power_dominant<F>(op: &F, found: &[EigenPair], shift: f64, start: ParamVector, cfg: &PowerConfig) -> PowerOutcome
where
    F: Fn(&ParamVector) -> ParamVector,
{
    let apply = |v: &ParamVector| -> ParamVector {
        let mut w = op(v);
        w.axpy(-shift, v, 1.0);
        orthogonalize(&mut w, found);
        w
    };
    let mut v = start;
    orthogonalize(&mut v, found);
    let n = v.norm();
    if n == 0.0 {
        return PowerOutcome { value: 0.0, vector: v, residual: 0.0, converged: true };
    }
    v /= n;
    let mut prev: Option<f64> = None;
    let mut last = PowerOutcome { value: 0.0, vector: v.clone(), residual: f64::INFINITY, converged: false };
    for _ in 0..cfg.max_iters {
        let w = apply(&v);
        let lambda = v.dot(&w);
        let residual = (&w - &v * lambda).norm();
        let scale = 1.0 + lambda.abs();
        let settled = prev.is_some_and(|p| (lambda - p).abs() <= cfg.tol * scale);
        last = PowerOutcome { value: lambda, vector: v.clone(), residual, converged: false };
        if residual <= cfg.tol * scale || (settled && residual <= 10.0 * cfg.tol * scale) {
            last.converged = true;
            return polish(&apply, last);
        }
        let wn = w.norm();
        if !wn.is_finite() {
            return last;
        }
        if wn <= f64::MIN_POSITIVE {
            last.converged = true;
            return last;
        }
        v = w / wn;
        prev = Some(lambda);
    }
    last
}

/// Extra iterations after convergence while the residual still shrinks fast
/// (ratio below 0.9), so well-separated pairs reach full precision.
fn polish<A>(apply: &A, mut out: PowerOutcome) -> PowerOutcome
where
    A: Fn(&ParamVector) -> ParamVector,
{
    for _ in 0..100 {
        let w = apply(&out.vector);
        let wn = w.norm();
        if !(wn > f64::MIN_POSITIVE && wn.is_finite()) {
            break;
        }
        let v = w / wn;
        let w = apply(&v);
        let lambda = v.dot(&w);
        let residual = (&w - &v * lambda).norm();
        if residual >= out.residual {
            break;
        }
        let fast = residual < 0.9 * out.residual;
        out = PowerOutcome { value: lambda, vector: v, residual, converged: true };
        if !fast {
            break;
        }
    }
    out
}

/// Top `k` eigenpairs (largest algebraic eigenvalues) of an implicit symmetric
/// operator of dimension `dim`.
pub fn top_eigenpairs_op<F>(op: F, dim: usize, k: usize, cfg: &PowerConfig) -> Result<SpectralInfo>
where
    F: Fn(&ParamVector) -> ParamVector,
{
    if k == 0 || k > dim {
        return Err(Error::Invalid(format!("requested {k} eigenpairs of a {dim}-dimensional operator")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs: Vec<EigenPair> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = power_dominant(&op, &pairs, 0.0, random_unit(&mut rng, dim), cfg);
        if !best.converged {
            // One re-randomised restart; keep whichever ended with the smaller residual.
            let retry = power_dominant(&op, &pairs, 0.0, random_unit(&mut rng, dim), cfg);
            if retry.converged || retry.residual < best.residual {
                best = retry;
            }
        }
        if best.value < 0.0 {
            // Largest-magnitude eigenvalue is negative: shift so the spectrum is
            // non-negative and the top algebraic eigenvalue dominates.
            let shift = best.value;
            let shifted = power_dominant(&op, &pairs, shift, random_unit(&mut rng, dim), cfg);
            let w = op(&shifted.vector);
            let value = shifted.vector.dot(&w);
            let mut r = &w - &shifted.vector * value;
            orthogonalize(&mut r, &pairs);
            best = PowerOutcome { value, residual: r.norm(), converged: shifted.converged, vector: shifted.vector };
        }
        if !best.value.is_finite() {
            return Err(Error::NonFinite("Hessian-vector product".into()));
        }
        let mut vector = best.vector;
        orthogonalize(&mut vector, &pairs);
        let n = vector.norm();
        if n > 0.0 {
            vector /= n;
        }
        canonical_sign(&mut vector);
        pairs.push(EigenPair { value: best.value, vector, residual: best.residual, converged: best.converged });
    }
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(finish(pairs, cfg.tol))
}

fn finish(pairs: Vec<EigenPair>, tol: f64) -> SpectralInfo {
    let lambda1 = pairs[0].value;
    let eigengap = if pairs.len() > 1 { lambda1 - pairs[1].value } else { f64::INFINITY };
    let converged = pairs.iter().all(|p| p.converged);
    let mut info = SpectralInfo {
        pairs,
        rank_estimate: 0,
        eigengap,
        converged,
        zero_hessian: lambda1 <= tol,
        tol,
    };
    info.rank_estimate = estimate_rank(&info, DEFAULT_RANK_THRESHOLD);
    info
}

/// Top `k` Hessian eigenpairs of `model` at `x`.
///
/// Convergence of a pair is declared when the Rayleigh residual
/// `|H v - lambda v|` falls below `tol (1 + |lambda|)`, or when successive
/// Rayleigh quotients agree to `tol (1 + |lambda|)` and the residual is within
/// ten times that. Pairs that exhaust `max_iters` are returned with
/// `converged = false` and their last residual.
pub fn top_eigenpairs(model: &dyn LossModel, x: &ParamVector, k: usize, cfg: &PowerConfig) -> Result<SpectralInfo> {
    model.check_dim(x)?;
    top_eigenpairs_op(|v| model.hvp(x, v), model.dim(), k, cfg)
}

/// Number of eigenvalues with `lambda_i >= threshold_ratio * lambda_1`; zero
/// when `lambda_1` itself is not positive.
pub fn estimate_rank(info: &SpectralInfo, threshold_ratio: f64) -> usize {
    let lambda1 = info.lambda1();
    if lambda1 <= info.tol {
        return 0;
    }
    info.pairs.iter().filter(|p| p.value >= threshold_ratio * lambda1).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopEigenGradient {
    /// `grad lambda_1 = grad^3 L [v1, v1, .]`.
    pub gradient: ParamVector,
    /// Set when the eigengap is too small for `lambda_1` to be differentiable.
    pub warning: Option<String>,
}

/// Gradient of the top Hessian eigenvalue, `grad^3 L(x)[v1, v1, .]`.
///
/// Uses the model's analytic third-order oracle when present; otherwise central
/// differences of `y -> v1 . H(y) v1` with `v1` frozen and step `1e-4 (1 + |x|)`.
pub fn grad_top_eigenvalue(model: &dyn LossModel, x: &ParamVector, info: &SpectralInfo) -> Result<TopEigenGradient> {
    model.check_dim(x)?;
    let v1 = info.v1();
    let warning = (info.pairs.len() > 1 && info.eigengap < 10.0 * info.tol).then(|| {
        format!("eigengap {:e} below 10 tol; top eigenvalue is not reliably differentiable", info.eigengap)
    });
    let gradient = match model.third_directional(x, v1) {
        Some(g) => g,
        None => {
            let eps = 1e-4 * (1.0 + x.norm());
            let mut probe = x.clone();
            ParamVector::from_fn(x.len(), |j, _| {
                probe[j] = x[j] + eps;
                let plus = v1.dot(&model.hvp(&probe, v1));
                probe[j] = x[j] - eps;
                let minus = v1.dot(&model.hvp(&probe, v1));
                probe[j] = x[j];
                (plus - minus) / (2.0 * eps)
            })
        }
    };
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("top-eigenvalue gradient".into()));
    }
    Ok(TopEigenGradient { gradient, warning })
}

/// Explicit Hessian assembled column by column from Hessian-vector products.
pub fn dense_hessian(model: &dyn LossModel, x: &ParamVector) -> DMatrix<f64> {
    let d = model.dim();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = ParamVector::zeros(d);
        e[j] = 1.0;
        h.set_column(j, &model.hvp(x, &e));
    }
    // Symmetrise away rounding asymmetry.
    (&h + h.transpose()) * 0.5
}

/// Full eigendecomposition of the dense Hessian (intended for `D <= 50`), sorted
/// by decreasing eigenvalue with the same sign convention as the power method.
pub fn dense_eigenpairs(model: &dyn LossModel, x: &ParamVector) -> Result<Vec<(f64, ParamVector)>> {
    model.check_dim(x)?;
    if model.dim() > 50 {
        return Err(Error::Invalid("dense eigendecomposition is limited to D <= 50".into()));
    }
    let eig = SymmetricEigen::new(dense_hessian(model, x));
    let mut out: Vec<(f64, ParamVector)> = (0..model.dim())
        .map(|i| {
            let mut v = eig.eigenvectors.column(i).into_owned();
            canonical_sign(&mut v);
            (eig.eigenvalues[i], v)
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(out)
}
