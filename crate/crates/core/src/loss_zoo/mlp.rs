use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LossModel;
use crate::{Error, ParamVector, Result};

/// Smooth hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// `z * sigmoid(z)`, a smooth GELU-like unit.
    Silu,
}

impl Activation {
    /// Returns `(sigma, sigma', sigma'')` at `z`.
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let ds = s * (1.0 - s);
                (z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s)))
            }
        }
    }
}

/// Regression data: `inputs[i]` maps to `targets[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::Invalid(format!(
                "dataset needs matching non-empty inputs/targets, got {} and {}",
                inputs.len(),
                targets.len()
            )));
        }
        let (din, dout) = (inputs[0].len(), targets[0].len());
        if din == 0 || dout == 0 {
            return Err(Error::Invalid("dataset rows must be non-empty".into()));
        }
        if inputs.iter().any(|r| r.len() != din) || targets.iter().any(|r| r.len() != dout) {
            return Err(Error::Invalid("dataset rows have inconsistent lengths".into()));
        }
        let finite = inputs.iter().chain(&targets).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("dataset contains non-finite values".into()));
        }
        Ok(Dataset { inputs, targets })
    }

    /// Seeded synthetic regression set: inputs uniform on `[-1, 1]^d`, targets
    /// `0.5 sin(w_k . a + c_k)` for a random teacher `(w_k, c_k)` per output.
    pub fn synthetic(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher: Vec<(Vec<f64>, f64)> = (0..out_dim)
            .map(|_| {
                let w = (0..in_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                (w, rng.random_range(-1.0..1.0))
            })
            .collect();
        let inputs: Vec<Vec<f64>> =
            (0..n).map(|_| (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets = inputs
            .iter()
            .map(|a| {
                teacher
                    .iter()
                    .map(|(w, c)| 0.5 * (w.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + c).sin())
                    .collect()
            })
            .collect();
        Dataset::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.targets[0].len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Layer {
    fn weight(&self, p: &[f64], o: usize, i: usize) -> f64 {
        p[self.w + o * self.n_in + i]
    }
}

/// Fully connected network with smooth hidden activations, linear output, and
/// mean squared error over all `(sample, output)` residuals.
///
/// Parameters are laid out layer by layer: the weight matrix row-major
/// (`n_out x n_in`) followed by the bias.
#[derive(Debug, Clone)]
pub struct MlpLoss {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
    dataset: Dataset,
    n_params: usize,
}

pub fn mlp_regression_loss(widths: &[usize], activation: Activation, dataset: Dataset) -> Result<MlpLoss> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Invalid("MLP needs at least two positive layer widths".into()));
    }
    if widths[0] != dataset.input_dim() || widths[widths.len() - 1] != dataset.output_dim() {
        return Err(Error::Invalid(format!(
            "widths {:?} do not match dataset input/output dims {}/{}",
            widths,
            dataset.input_dim(),
            dataset.output_dim()
        )));
    }
    let mut layers = Vec::with_capacity(widths.len() - 1);
    let mut offset = 0;
    for pair in widths.windows(2) {
        let (n_in, n_out) = (pair[0], pair[1]);
        layers.push(Layer { n_in, n_out, w: offset, b: offset + n_in * n_out });
        offset += n_in * n_out + n_out;
    }
    Ok(MlpLoss { widths: widths.to_vec(), activation, layers, dataset, n_params: offset })
}

/// Per-sample forward state: pre-activations and layer inputs.
struct Forward {
    zs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

impl MlpLoss {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Gaussian initialisation with std `scale / sqrt(fan_in)` for weights and zero biases.
    pub fn init_params(&self, seed: u64, scale: f64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamVector::zeros(self.n_params);
        for layer in &self.layers {
            let std = scale / (layer.n_in as f64).sqrt();
            for k in 0..layer.n_in * layer.n_out {
                p[layer.w + k] = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    /// Network outputs for one input.
    pub fn predict(&self, p: &ParamVector, input: &[f64]) -> Vec<f64> {
        let mut f = self.forward(p.as_slice(), input);
        f.zs.pop().unwrap_or_default()
    }

    fn n_terms(&self) -> f64 {
        (self.dataset.len() * self.dataset.output_dim()) as f64
    }

    fn is_last(&self, l: usize) -> bool {
        l + 1 == self.layers.len()
    }

    fn forward(&self, p: &[f64], input: &[f64]) -> Forward {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &acts[l];
            let z: Vec<f64> = (0..layer.n_out)
                .map(|o| p[layer.b + o] + (0..layer.n_in).map(|i| layer.weight(p, o, i) * a[i]).sum::<f64>())
                .collect();
            if !self.is_last(l) {
                acts.push(z.iter().map(|&zi| self.activation.eval(zi).0).collect());
            }
            zs.push(z);
        }
        Forward { zs, acts }
    }

    /// Accumulates `J^T delta_out` into `grad`, where `delta_out` is the
    /// derivative with respect to the output pre-activation.
    fn backward(&self, p: &[f64], fwd: &Forward, delta_out: Vec<f64>, grad: &mut [f64]) {
        let mut delta = delta_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &fwd.acts[l];
            for o in 0..layer.n_out {
                for i in 0..layer.n_in {
                    grad[layer.w + o * layer.n_in + i] += delta[o] * a[i];
                }
                grad[layer.b + o] += delta[o];
            }
            if l > 0 {
                let zprev = &fwd.zs[l - 1];
                delta = (0..layer.n_in)
                    .map(|i| {
                        let u: f64 = (0..layer.n_out).map(|o| layer.weight(p, o, i) * delta[o]).sum();
                        self.activation.eval(zprev[i]).1 * u
                    })
                    .collect();
            }
        }
    }

    /// Pearlmutter R-pass: accumulates `scale * grad^2 l(p) v` for one sample into `out`.
    fn sample_hvp(&self, p: &[f64], v: &[f64], input: &[f64], target: &[f64], scale: f64, out: &mut [f64]) {
        let fwd = self.forward(p, input);
        let nl = self.layers.len();
        // Forward R pass.
        let mut ra: Vec<Vec<f64>> = Vec::with_capacity(nl);
        let mut rz: Vec<Vec<f64>> = Vec::with_capacity(nl);
        ra.push(vec![0.0; input.len()]);
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &fwd.acts[l];
            let r = &ra[l];
            let z: Vec<f64> = (0..layer.n_out)
                .map(|o| {
                    v[layer.b + o]
                        + (0..layer.n_in)
                            .map(|i| layer.weight(v, o, i) * a[i] + layer.weight(p, o, i) * r[i])
                            .sum::<f64>()
                })
                .collect();
            if !self.is_last(l) {
                ra.push(z.iter().zip(&fwd.zs[l]).map(|(rzi, &zi)| self.activation.eval(zi).1 * rzi).collect());
            }
            rz.push(z);
        }
        // Backward pass carrying both delta and R{delta}.
        let out_z = &fwd.zs[nl - 1];
        let mut delta: Vec<f64> = out_z.iter().zip(target).map(|(z, t)| 2.0 * scale * (z - t)).collect();
        let mut rdelta: Vec<f64> = rz[nl - 1].iter().map(|r| 2.0 * scale * r).collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &fwd.acts[l];
            let r = &ra[l];
            for o in 0..layer.n_out {
                for i in 0..layer.n_in {
                    out[layer.w + o * layer.n_in + i] += rdelta[o] * a[i] + delta[o] * r[i];
                }
                out[layer.b + o] += rdelta[o];
            }
            if l > 0 {
                let zprev = &fwd.zs[l - 1];
                let rzprev = &rz[l - 1];
                let mut nd = vec![0.0; layer.n_in];
                let mut nrd = vec![0.0; layer.n_in];
                for i in 0..layer.n_in {
                    let mut u = 0.0;
                    let mut ru = 0.0;
                    for o in 0..layer.n_out {
                        u += layer.weight(p, o, i) * delta[o];
                        ru += layer.weight(v, o, i) * delta[o] + layer.weight(p, o, i) * rdelta[o];
                    }
                    let (_, d1, d2) = self.activation.eval(zprev[i]);
                    nd[i] = d1 * u;
                    nrd[i] = d2 * rzprev[i] * u + d1 * ru;
                }
                delta = nd;
                rdelta = nrd;
            }
        }
    }
}

impl LossModel for MlpLoss {
    fn dim(&self) -> usize {
        self.n_params
    }

    fn value(&self, x: &ParamVector) -> f64 {
        let p = x.as_slice();
        let total: f64 = self
            .dataset
            .inputs
            .iter()
            .zip(&self.dataset.targets)
            .map(|(a, t)| {
                let fwd = self.forward(p, a);
                fwd.zs[fwd.zs.len() - 1].iter().zip(t).map(|(z, b)| (z - b) * (z - b)).sum::<f64>()
            })
            .sum();
        total / self.n_terms()
    }

    fn gradient(&self, x: &ParamVector) -> ParamVector {
        let p = x.as_slice();
        let scale = 1.0 / self.n_terms();
        let mut grad = vec![0.0; self.n_params];
        for (a, t) in self.dataset.inputs.iter().zip(&self.dataset.targets) {
            let fwd = self.forward(p, a);
            let delta = fwd.zs[fwd.zs.len() - 1].iter().zip(t).map(|(z, b)| 2.0 * scale * (z - b)).collect();
            self.backward(p, &fwd, delta, &mut grad);
        }
        ParamVector::from_vec(grad)
    }

    fn hvp(&self, x: &ParamVector, v: &ParamVector) -> ParamVector {
        let scale = 1.0 / self.n_terms();
        let mut out = vec![0.0; self.n_params];
        for (a, t) in self.dataset.inputs.iter().zip(&self.dataset.targets) {
            self.sample_hvp(x.as_slice(), v.as_slice(), a, t, scale, &mut out);
        }
        ParamVector::from_vec(out)
    }

    fn per_example_gradients(&self, x: &ParamVector) -> Option<Vec<ParamVector>> {
        let p = x.as_slice();
        let jac = self.output_jacobian(x)?;
        let mut out = Vec::with_capacity(jac.len());
        let mut rows = jac.into_iter();
        for (a, t) in self.dataset.inputs.iter().zip(&self.dataset.targets) {
            let fwd = self.forward(p, a);
            for (z, b) in fwd.zs[fwd.zs.len() - 1].iter().zip(t) {
                let row = rows.next()?;
                out.push(row * (2.0 * (z - b)));
            }
        }
        Some(out)
    }

    fn output_jacobian(&self, x: &ParamVector) -> Option<Vec<ParamVector>> {
        let p = x.as_slice();
        let dout = self.dataset.output_dim();
        let mut rows = Vec::with_capacity(self.dataset.len() * dout);
        for a in &self.dataset.inputs {
            let fwd = self.forward(p, a);
            for k in 0..dout {
                let mut e = vec![0.0; dout];
                e[k] = 1.0;
                let mut g = vec![0.0; self.n_params];
                self.backward(p, &fwd, e, &mut g);
                rows.push(ParamVector::from_vec(g));
            }
        }
        Some(rows)
    }

    fn name(&self) -> &str {
        "mlp_regression"
    }
}
