use nalgebra::dvector;

use super::LossModel;
use crate::ParamVector;

/// `L(x, y) = (1 + x^2) y^2`.
///
/// The zero-loss manifold is the line `y = 0`, on which the Hessian is
/// `diag(0, 2(1 + x^2))`, so the sharpness `2(1 + x^2)` is minimised at the origin.
/// The loss is the single squared residual `f(x, y)^2` with `f = sqrt(1 + x^2) y`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyProductLoss;

pub fn toy_product_loss() -> ToyProductLoss {
    ToyProductLoss
}

impl ToyProductLoss {
    /// Analytic Hessian `[[2y^2, 4xy], [4xy, 2(1+x^2)]]`, row-major.
    pub fn hessian(&self, p: &ParamVector) -> [[f64; 2]; 2] {
        let (x, y) = (p[0], p[1]);
        [[2.0 * y * y, 4.0 * x * y], [4.0 * x * y, 2.0 * (1.0 + x * x)]]
    }
}

impl LossModel for ToyProductLoss {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, p: &ParamVector) -> f64 {
        let (x, y) = (p[0], p[1]);
        (1.0 + x * x) * y * y
    }

    fn gradient(&self, p: &ParamVector) -> ParamVector {
        let (x, y) = (p[0], p[1]);
        dvector![2.0 * x * y * y, 2.0 * (1.0 + x * x) * y]
    }

    fn hvp(&self, p: &ParamVector, v: &ParamVector) -> ParamVector {
        let h = self.hessian(p);
        dvector![h[0][0] * v[0] + h[0][1] * v[1], h[1][0] * v[0] + h[1][1] * v[1]]
    }

    fn per_example_gradients(&self, p: &ParamVector) -> Option<Vec<ParamVector>> {
        Some(vec![self.gradient(p)])
    }

    fn output_jacobian(&self, p: &ParamVector) -> Option<Vec<ParamVector>> {
        let (x, y) = (p[0], p[1]);
        let s = (1.0 + x * x).sqrt();
        Some(vec![dvector![x * y / s, s]])
    }

    fn third_directional(&self, p: &ParamVector, v: &ParamVector) -> Option<ParamVector> {
        // Non-zero third partials: L_xxy = 4y, L_xyy = 4x.
        let (x, y) = (p[0], p[1]);
        let (a, b) = (v[0], v[1]);
        Some(dvector![8.0 * y * a * b + 4.0 * x * b * b, 4.0 * y * a * a + 8.0 * x * a * b])
    }

    fn name(&self) -> &str {
        "toy_product"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_gradient_at_probe() {
        let m = toy_product_loss();
        let p = dvector![1.0, 0.5];
        assert!((m.value(&p) - 0.5).abs() < 1e-15);
        assert!((m.gradient(&p) - dvector![0.5, 2.0]).amax() < 1e-15);
    }

    #[test]
    fn zero_on_manifold() {
        let m = toy_product_loss();
        let p = dvector![3.0, 0.0];
        assert_eq!(m.value(&p), 0.0);
        assert_eq!(m.gradient(&p), dvector![0.0, 0.0]);
        assert_eq!(m.hessian(&dvector![1.0, 0.0]), [[0.0, 0.0], [0.0, 4.0]]);
    }

    #[test]
    fn third_directional_on_manifold() {
        let m = toy_product_loss();
        let t = m.third_directional(&dvector![1.0, 0.0], &dvector![0.0, 1.0]).unwrap();
        assert_eq!(t, dvector![4.0, 0.0]);
        let t = m.third_directional(&dvector![2.0, 0.0], &dvector![0.0, 1.0]).unwrap();
        assert_eq!(t, dvector![8.0, 0.0]);
    }

    #[test]
    fn third_directional_matches_hvp_differences() {
        let m = toy_product_loss();
        let p = dvector![0.7, -0.4];
        let v = dvector![0.6, 0.8];
        let eps = 1e-5;
        // d/dp_j of v^T H(p) v, coordinate by coordinate.
        let mut fd = ParamVector::zeros(2);
        for j in 0..2 {
            let mut plus = p.clone();
            plus[j] += eps;
            let mut minus = p.clone();
            minus[j] -= eps;
            fd[j] = (v.dot(&m.hvp(&plus, &v)) - v.dot(&m.hvp(&minus, &v))) / (2.0 * eps);
        }
        assert!((m.third_directional(&p, &v).unwrap() - fd).amax() < 1e-8);
    }
}
