//! The gradient-flow limit map `Phi`, normal/tangent projectors on the zero-loss
//! manifold, and manifold-relative observables.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::loss_zoo::LossModel;
use crate::spectral::{dense_hessian, top_eigenpairs, PowerConfig, SpectralInfo};
use crate::{Error, ParamVector, Result, LOSS_FLOOR};

/// Relative eigenvalue cutoff of the pseudo-inverse used for span projectors.
pub const PINV_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiConfig {
    /// Gradient-norm stopping tolerance; `None` means `1e-10 (1 + lambda_1(x))`.
    pub tol_phi: Option<f64>,
    /// Relative local error tolerance of the integrator.
    pub rtol: f64,
    pub max_flow_time: f64,
    pub max_steps: usize,
    /// Number of eigenpairs attached at the endpoint (clamped to the dimension).
    pub k: usize,
    pub power: PowerConfig,
}

impl Default for PhiConfig {
    fn default() -> Self {
        PhiConfig {
            tol_phi: None,
            rtol: 1e-11,
            max_flow_time: 1e6,
            max_steps: 200_000,
            k: 4,
            power: PowerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiResult {
    pub phi: ParamVector,
    pub residual_grad_norm: f64,
    pub flow_time_used: f64,
    pub spectral: SpectralInfo,
    /// False when the flow budget ran out; `phi` is then the best point reached.
    pub converged: bool,
    pub tol: f64,
}

// Dormand-Prince 5(4) tableau.
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Largest dimension for which the stiff phase assembles dense Hessians.
pub const STIFF_DENSE_MAX_DIM: usize = 200;
const STIFF_RTOL: f64 = 1e-9;

/// `(1 - exp(-l h)) / l`, the exact flow time-weight of an eigendirection.
fn phi1(l: f64, h: f64) -> f64 {
    let z = l * h;
    if z.abs() < 1e-8 {
        h * (1.0 - 0.5 * z)
    } else {
        -(-z).exp_m1() / l
    }
}

/// Linearisation of the flow at a point: Hessian eigenbasis plus gradient coordinates.
struct LocalFlow {
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    coeffs: ParamVector,
}

impl LocalFlow {
    fn at(model: &dyn LossModel, y: &ParamVector) -> Self {
        let eig = SymmetricEigen::new(dense_hessian(model, y));
        let coeffs = eig.eigenvectors.transpose() * model.gradient(y);
        LocalFlow { eig, coeffs }
    }

    /// Exponential Euler step `y - V phi1(Lambda, h) V^T grad L(y)`.
    fn step(&self, y: &ParamVector, h: f64) -> ParamVector {
        let scaled = self.coeffs.zip_map(&self.eig.eigenvalues, |c, l| c * phi1(l, h));
        y - &self.eig.eigenvectors * scaled
    }
}

/// Runs gradient flow `dx/dt = -grad L(x)` from `x` until `|grad L| <= tol_phi`.
///
/// Adaptive Dormand-Prince 5(4) starting from step `0.1 / lambda_1(x)`. Steps that
/// fail the local error test or increase the loss are retried with a smaller step.
/// Once the step size is limited by `lambda_1` rather than accuracy (and the
/// dimension is at most [`STIFF_DENSE_MAX_DIM`]), integration continues with
/// exponential Euler steps on the dense Hessian under step-doubling error control.
pub fn estimate_phi(model: &dyn LossModel, x: &ParamVector, cfg: &PhiConfig) -> Result<PhiResult> {
    model.check_dim(x)?;
    let k = cfg.k.clamp(1, model.dim());
    let lambda1 = top_eigenpairs(model, x, 1, &cfg.power)?.lambda1().abs();
    let tol = cfg.tol_phi.unwrap_or(1e-10 * (1.0 + lambda1));
    let curvature = lambda1.max(1e-12);
    let h_floor = 1e-14 / curvature;
    let mut h = 0.1 / curvature;

    let mut y = x.clone();
    let mut loss = model.value(&y);
    let mut grad = model.gradient(&y);
    let mut t = 0.0;
    let mut steps = 0;
    let mut rejects = 0usize;
    let mut stiff = false;
    let mut local: Option<LocalFlow> = None;
    let converged = loop {
        if grad.norm() <= tol {
            break true;
        }
        if t >= cfg.max_flow_time || steps >= cfg.max_steps || h < h_floor {
            break false;
        }
        steps += 1;
        if stiff {
            let here = local.get_or_insert_with(|| LocalFlow::at(model, &y));
            let full = here.step(&y, h);
            let mid = here.step(&y, 0.5 * h);
            let half = LocalFlow::at(model, &mid).step(&mid, 0.5 * h);
            let err = (&full - &half)
                .iter()
                .zip(y.iter())
                .map(|(e, a)| e.abs() / (STIFF_RTOL * (1.0 + a.abs())))
                .fold(0.0, f64::max);
            let half = 2.0 * &half - &full;
            let cand_loss = model.value(&half);
            if !err.is_finite() || !cand_loss.is_finite() || err > 1.0 || cand_loss > loss {
                h *= 0.25;
                continue;
            }
            y = half;
            local = None;
            loss = cand_loss;
            grad = model.gradient(&y);
            t += h;
            h *= if err > 0.0 { (0.9 / err.sqrt()).clamp(0.2, 4.0) } else { 4.0 };
            continue;
        }
        let mut ks: Vec<ParamVector> = Vec::with_capacity(7);
        ks.push(-&grad);
        for row in DP_A.iter() {
            let mut stage = y.clone();
            for (a, kk) in row.iter().zip(&ks) {
                if *a != 0.0 {
                    stage.axpy(h * a, kk, 1.0);
                }
            }
            ks.push(-model.gradient(&stage));
        }
        // The last stage was evaluated at the 5th-order solution.
        let mut candidate = y.clone();
        for (a, kk) in DP_A[5].iter().zip(&ks) {
            if *a != 0.0 {
                candidate.axpy(h * a, kk, 1.0);
            }
        }
        let mut err_vec = ParamVector::zeros(y.len());
        for (e, kk) in DP_E.iter().zip(&ks) {
            if *e != 0.0 {
                err_vec.axpy(h * e, kk, 1.0);
            }
        }
        let err = err_vec
            .iter()
            .zip(y.iter().zip(candidate.iter()))
            .map(|(e, (a, b))| e.abs() / (cfg.rtol * (1.0 + a.abs().max(b.abs()))))
            .fold(0.0, f64::max);
        let cand_loss = model.value(&candidate);
        if !cand_loss.is_finite() || !err.is_finite() {
            rejects += 1;
            if rejects > 60 {
                return Err(Error::NonFinite("gradient flow".into()));
            }
            h *= 0.2;
            continue;
        }
        if err > 1.0 || cand_loss > loss {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.5);
            continue;
        }
        rejects = 0;
        y = candidate;
        loss = cand_loss;
        grad = -ks.pop().expect("seven stages");
        t += h;
        h *= if err > 0.0 { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
        // Explicit steps are now bounded by stability rather than accuracy.
        if model.dim() <= STIFF_DENSE_MAX_DIM && h * curvature >= 2.0 {
            stiff = true;
        }
    };
    let spectral = top_eigenpairs(model, &y, k, &cfg.power)?;
    Ok(PhiResult { residual_grad_norm: grad.norm(), phi: y, flow_time_used: t, spectral, converged, tol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    /// Span of the top-`M` Hessian eigenvectors.
    HessianEigvecs,
    /// Span of the per-example output gradients `grad f_i`.
    PerExampleSpan,
}

/// Orthogonal projector onto the normal space at a manifold point, held as an
/// orthonormal basis. The tangent projector is its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    basis: Vec<ParamVector>,
    dim: usize,
}

impl Projector {
    pub fn from_orthonormal(basis: Vec<ParamVector>, dim: usize) -> Self {
        Projector { basis, dim }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[ParamVector] {
        &self.basis
    }

    /// `P v`.
    pub fn normal(&self, v: &ParamVector) -> ParamVector {
        let mut out = ParamVector::zeros(self.dim);
        for q in &self.basis {
            out.axpy(q.dot(v), q, 1.0);
        }
        out
    }

    /// `(I - P) v`.
    pub fn tangent(&self, v: &ParamVector) -> ParamVector {
        v - self.normal(v)
    }
}

/// Normal-space projector at `p` (assumed on the manifold).
///
/// `HessianEigvecs` uses the first `spectral.rank_estimate` eigenvectors.
/// `PerExampleSpan` orthonormalises the rows of the output Jacobian through the
/// eigendecomposition of their Gram matrix, dropping directions with eigenvalue
/// below `PINV_RIDGE` times the largest (the pseudo-inverse least-squares projector).
pub fn normal_projection(
    model: &dyn LossModel,
    p: &ParamVector,
    method: ProjectionMethod,
    spectral: &SpectralInfo,
) -> Result<Projector> {
    model.check_dim(p)?;
    let dim = model.dim();
    match method {
        ProjectionMethod::HessianEigvecs => {
            let m = spectral.rank_estimate;
            if m > spectral.pairs.len() {
                return Err(Error::Invalid("rank estimate exceeds computed eigenpairs".into()));
            }
            Ok(Projector { basis: spectral.pairs[..m].iter().map(|e| e.vector.clone()).collect(), dim })
        }
        ProjectionMethod::PerExampleSpan => {
            let rows = model.output_jacobian(p).ok_or(Error::Unsupported("per-example output gradients"))?;
            Ok(Projector { basis: span_basis(&rows, dim), dim })
        }
    }
}

/// Orthonormal basis of `span(rows)` via the Gram matrix.
pub fn span_basis(rows: &[ParamVector], dim: usize) -> Vec<ParamVector> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let gram = DMatrix::from_fn(n, n, |i, j| rows[i].dot(&rows[j]));
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > PINV_RIDGE * top)
        .map(|k| {
            let u = eig.eigenvectors.column(k);
            let mut q = ParamVector::zeros(dim);
            for (i, row) in rows.iter().enumerate() {
                q.axpy(u[i], row, 1.0);
            }
            q / eig.eigenvalues[k].sqrt()
        })
        .collect()
}

/// Which Hessian weighting defines the tilde displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TildeKind {
    /// `x~ = H(Phi) (x - Phi)`.
    NormalizedGd,
    /// `x~ = sqrt(2 H(Phi)) (x - Phi)`.
    SqrtLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldObservables {
    /// Manifold co-dimension used (number of normal eigenpairs).
    pub m: usize,
    /// `R_j`, `j = 1..M`.
    pub r: Vec<f64>,
    /// `R-bar_j`, `j = 1..M`.
    pub rbar: Vec<f64>,
    /// Angle between `x~` and the top eigenspace, in `[0, pi/2]`.
    pub theta: f64,
    /// `|<v1, x~>|`.
    pub g: f64,
    pub tilde_norm: f64,
    /// Normalised Rayleigh quotient of the raw gradient at `x`; `None` at critical points.
    pub alignment: Option<f64>,
    pub lambda1_at_x: f64,
    /// `<v_i, x - Phi>` for `i = 1..M`.
    pub normal_coords: Vec<f64>,
}

/// Manifold-relative observables of `x` given its projection `phi`.
///
/// Eigenpairs are those of the Hessian at `Phi(x)`; `M` is the rank estimate
/// attached to `phi`. With `G = |<v1, x~>|`, `theta = atan(|P_{2:M} x~| / G)`,
/// taken as `pi/2` when `G < 1e-300`.
pub fn observables(
    model: &dyn LossModel,
    x: &ParamVector,
    eta: f64,
    phi: &PhiResult,
    kind: TildeKind,
    power: &PowerConfig,
) -> Result<ManifoldObservables> {
    model.check_dim(x)?;
    let m = phi.spectral.rank_estimate;
    if m == 0 {
        return Err(Error::DegenerateManifold("rank estimate at Phi(x) is zero".into()));
    }
    let pairs = &phi.spectral.pairs[..m];
    let disp = x - &phi.phi;
    let coords: Vec<f64> = pairs.iter().map(|p| p.vector.dot(&disp)).collect();
    let lambdas: Vec<f64> = pairs.iter().map(|p| p.value).collect();

    let tail = |j: usize, weight: &dyn Fn(f64) -> f64| -> f64 {
        (j..m).map(|i| weight(lambdas[i]) * coords[i] * coords[i]).sum::<f64>().sqrt()
    };
    let r = (0..m).map(|j| tail(j, &|l| l * l) - lambdas[j] * eta).collect();
    let rbar = (0..m).map(|j| tail(j, &|l| l) - eta * 0.5f64.sqrt() * lambdas[j]).collect();

    let tilde: Vec<f64> = coords
        .iter()
        .zip(&lambdas)
        .map(|(c, &l)| match kind {
            TildeKind::NormalizedGd => l * c,
            TildeKind::SqrtLoss => (2.0 * l.max(0.0)).sqrt() * c,
        })
        .collect();
    let g = tilde[0].abs();
    // Start the fold at +0 so an empty tail gives theta = +0.
    let rest = tilde[1..].iter().fold(0.0, |a, t| a + t * t).sqrt();
    let tilde_norm = tilde.iter().map(|t| t * t).sum::<f64>().sqrt();
    let theta = if g < 1e-300 { std::f64::consts::FRAC_PI_2 } else { (rest / g).atan() };

    let grad = model.gradient(x);
    let lambda1_at_x = top_eigenpairs(model, x, 1, power)?.lambda1();
    let gn2 = grad.norm_squared();
    let alignment = (gn2.sqrt() > LOSS_FLOOR && lambda1_at_x > 0.0)
        .then(|| grad.dot(&model.hvp(x, &grad)) / (lambda1_at_x * gn2));

    Ok(ManifoldObservables { m, r, rbar, theta, g, tilde_norm, alignment, lambda1_at_x, normal_coords: coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_zoo::{quadratic_loss, toy_product_loss, QuadraticSpec};
    use nalgebra::dvector;

    /// Root of `ln x + x^2/2 = c` on `x > 0` by bisection.
    fn conserved_root(c: f64) -> f64 {
        let f = |x: f64| x.ln() + 0.5 * x * x - c;
        let (mut lo, mut hi) = (1e-6, 10.0);
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

    #[test]
    fn quadratic_phi_is_origin() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        let r = estimate_phi(&q, &dvector![0.8, -1.3], &PhiConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.phi.amax() < 1e-9);
        assert!(q.value(&r.phi) <= q.value(&dvector![0.8, -1.3]));
    }

    #[test]
    fn toy_phi_follows_conserved_quantity() {
        let m = toy_product_loss();
        let r = estimate_phi(&m, &dvector![1.0, 0.5], &PhiConfig::default()).unwrap();
        let expect = conserved_root(0.375);
        assert!((expect - 0.93754).abs() < 1e-5);
        assert!((r.phi[0] - expect).abs() < 1e-8, "{} vs {expect}", r.phi[0]);
        assert!(r.phi[1].abs() < 1e-9);
        assert!(r.residual_grad_norm <= r.tol);
        assert_eq!(r.spectral.rank_estimate, 1);
    }

    #[test]
    fn phi_of_manifold_point_is_itself() {
        let m = toy_product_loss();
        let r = estimate_phi(&m, &dvector![2.0, 0.0], &PhiConfig::default()).unwrap();
        assert_eq!(r.phi, dvector![2.0, 0.0]);
        assert_eq!(r.flow_time_used, 0.0);
    }

    #[test]
    fn phi_is_idempotent() {
        let m = toy_product_loss();
        let first = estimate_phi(&m, &dvector![0.6, -0.8], &PhiConfig::default()).unwrap();
        let second = estimate_phi(&m, &first.phi, &PhiConfig::default()).unwrap();
        assert!((&second.phi - &first.phi).norm() <= 10.0 * first.tol);
    }

    #[test]
    fn phi_budget_exhaustion_is_reported() {
        let m = toy_product_loss();
        let cfg = PhiConfig { max_steps: 3, ..PhiConfig::default() };
        let r = estimate_phi(&m, &dvector![1.0, 0.5], &cfg).unwrap();
        assert!(!r.converged);
        assert!(m.value(&r.phi) < m.value(&dvector![1.0, 0.5]));
    }

    #[test]
    fn phi_kills_gradient_direction_to_first_order() {
        // d Phi(x) grad L(x) = 0: moving along the gradient changes Phi only at O(delta^2).
        let m = toy_product_loss();
        let x = dvector![0.9, 0.2];
        let g = m.gradient(&x);
        let g = &g / g.norm();
        let base = estimate_phi(&m, &x, &PhiConfig::default()).unwrap().phi;
        let err = |delta: f64| (estimate_phi(&m, &(&x + &g * delta), &PhiConfig::default()).unwrap().phi - &base).norm();
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e2 / e1 <= 0.3, "{e1} {e2}");
    }

    #[test]
    fn toy_projectors() {
        let m = toy_product_loss();
        let p = dvector![1.0, 0.0];
        let spec = top_eigenpairs(&m, &p, 2, &PowerConfig::default()).unwrap();
        for method in [ProjectionMethod::HessianEigvecs, ProjectionMethod::PerExampleSpan] {
            let proj = normal_projection(&m, &p, method, &spec).unwrap();
            assert_eq!(proj.rank(), 1);
            assert!((proj.tangent(&dvector![4.0, 0.0]) - dvector![4.0, 0.0]).amax() < 1e-12);
            assert!((proj.normal(&dvector![0.0, 3.0]) - dvector![0.0, 3.0]).amax() < 1e-12);
        }
    }

    #[test]
    fn quadratic_point_manifold_projector_is_identity() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        let p = dvector![0.0, 0.0];
        let spec = top_eigenpairs(&q, &p, 2, &PowerConfig::default()).unwrap();
        let proj = normal_projection(&q, &p, ProjectionMethod::HessianEigvecs, &spec).unwrap();
        let v = dvector![0.3, -2.0];
        assert!((proj.normal(&v) - &v).amax() < 1e-12);
        assert!(proj.tangent(&v).amax() < 1e-12);
        assert_eq!(
            normal_projection(&q, &p, ProjectionMethod::PerExampleSpan, &spec),
            Err(Error::Unsupported("per-example output gradients"))
        );
    }

    #[test]
    fn quadratic_r_values() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        let x = dvector![0.05, 0.02];
        let phi = estimate_phi(&q, &x, &PhiConfig::default()).unwrap();
        let obs = observables(&q, &x, 0.1, &phi, TildeKind::NormalizedGd, &PowerConfig::default()).unwrap();
        let r1 = (0.05f64 * 0.05 + 0.008 * 0.008).sqrt() - 0.1;
        assert!((obs.r[0] - r1).abs() < 1e-9);
        assert!((obs.r[0] + 0.0493640).abs() < 1e-7);
        assert!((obs.r[1] + 0.032).abs() < 1e-9);
        // R-bar uses sqrt(lambda) weights and an eta/sqrt(2) threshold.
        let rb2 = (0.4f64 * 0.02 * 0.02).sqrt() - 0.1 * 0.5f64.sqrt() * 0.4;
        assert!((obs.rbar[1] - rb2).abs() < 1e-9);
    }

    #[test]
    fn on_manifold_observables() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        let x = dvector![0.0, 0.0];
        let phi = estimate_phi(&q, &x, &PhiConfig::default()).unwrap();
        let obs = observables(&q, &x, 0.1, &phi, TildeKind::NormalizedGd, &PowerConfig::default()).unwrap();
        assert!((obs.r[0] + 0.1).abs() < 1e-12 && (obs.r[1] + 0.04).abs() < 1e-12);
        assert_eq!(obs.g, 0.0);
        assert_eq!(obs.theta, std::f64::consts::FRAC_PI_2);
        assert_eq!(obs.alignment, None);
    }

    #[test]
    fn aligned_displacement() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        let x = dvector![0.03, 0.0];
        let phi = estimate_phi(&q, &x, &PhiConfig::default()).unwrap();
        for kind in [TildeKind::NormalizedGd, TildeKind::SqrtLoss] {
            let obs = observables(&q, &x, 0.1, &phi, kind, &PowerConfig::default()).unwrap();
            assert!(obs.theta < 1e-6);
            assert!((obs.alignment.unwrap() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_manifold_rejected() {
        let q = quadratic_loss(&QuadraticSpec::Diagonal(vec![1.0, 0.4])).unwrap();
        let mut phi = estimate_phi(&q, &dvector![0.1, 0.1], &PhiConfig::default()).unwrap();
        phi.spectral.rank_estimate = 0;
        let err = observables(&q, &dvector![0.1, 0.1], 0.1, &phi, TildeKind::NormalizedGd, &PowerConfig::default());
        assert!(matches!(err, Err(Error::DegenerateManifold(_))));
    }
}
