//! Small feed-forward approximators with exact reverse-mode parameter
//! gradients and an Adam optimizer.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (`out x in`, row-major) followed by its bias. Hidden layers use a leaky
//! rectifier; the output layer is linear. An empty `hidden` list gives a
//! plain affine map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Weight initialization rule. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// `U(-scale, scale)` for every weight.
    Uniform { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub negative_slope: f64,
    pub init: Init,
}

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return invalid("all layer widths must be at least 1");
        }
        Ok(Self {
            input,
            hidden,
            output,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            init: Init::Glorot,
        })
    }

    /// Two hidden layers of 64 units.
    pub fn two_hidden(input: usize, output: usize) -> Result<Self> {
        Self::new(input, vec![64, 64], output)
    }

    pub fn linear(input: usize, output: usize) -> Result<Self> {
        Self::new(input, Vec::new(), output)
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Draw a parameter vector according to [`MlpSpec::init`].
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params());
        for w in self.widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = match self.init {
                Init::Glorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Uniform { scale } => scale,
            };
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-scale..=scale));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            ));
        }
        if input.len() != self.input {
            return invalid(format!(
                "expected input width {}, got {}",
                self.input,
                input.len()
            ));
        }
        Ok(())
    }

    fn leaky(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.negative_slope * z
        }
    }

    fn leaky_slope(&self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.negative_slope
        }
    }

    /// Pre-activations of every layer (the last one is the output).
    fn pre_activations(&self, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let widths = self.widths();
        let n_layers = widths.len() - 1;
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let h: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                zs[l - 1].iter().map(|&z| self.leaky(z)).collect()
            };
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let z = weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, b)| b + dot(row, &h))
                .collect();
            zs.push(z);
            offset += n_out * (n_in + 1);
        }
        zs
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input)?;
        Ok(self.pre_activations(params, input).pop().unwrap())
    }

    /// Gradient of `<forward(params, input), cotangent>` with respect to
    /// `params`.
    pub fn grad_params(&self, params: &[f64], input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_params()];
        self.accumulate_grad(params, input, cotangent, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * d<forward, cotangent>/dparams` into `grad`. Returns the
    /// forward output.
    pub fn accumulate_grad(
        &self,
        params: &[f64],
        input: &[f64],
        cotangent: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check(params, input)?;
        if cotangent.len() != self.output {
            return invalid("cotangent width differs from the output width");
        }
        if grad.len() != params.len() {
            return invalid("gradient buffer has the wrong length");
        }
        let widths = self.widths();
        let n_layers = widths.len() - 1;
        let zs = self.pre_activations(params, input);
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += widths[l + 1] * (widths[l] + 1);
        }
        let mut delta: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let off = offsets[l];
            let h: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                zs[l - 1].iter().map(|&z| self.leaky(z)).collect()
            };
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(&h) {
                    *g += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &params[off..off + n_in * n_out];
                let mut back = vec![0.0; n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (b, w) in back.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *b += d * w;
                    }
                }
                delta = back
                    .into_iter()
                    .zip(&zs[l - 1])
                    .map(|(b, &z)| b * self.leaky_slope(z))
                    .collect();
            }
        }
        Ok(zs.into_iter().next_back().unwrap())
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4
        .remainder()
        .iter()
        .zip(b4.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Spec plus parameters, as saved to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Approximator {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Approximator {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = spec.init_params(rng);
        Self { spec, params }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let params = vec![0.0; spec.n_params()];
        Self { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.spec.forward(&self.params, input)
    }

    /// Convenience for scalar-output networks.
    pub fn eval_scalar(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward(input)?[0])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let approx: Approximator = serde_json::from_str(text)?;
        if approx.params.len() != approx.spec.n_params() {
            return invalid("saved parameter count disagrees with the spec");
        }
        if approx.params.iter().any(|p| !p.is_finite()) {
            return invalid("saved parameters are not finite");
        }
        Ok(approx)
    }
}

/// Bias-corrected Adam. [`AdamState::step`] descends along the gradient;
/// negate the gradient to ascend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != params.len() {
            return invalid("Adam state, parameters and gradient differ in length");
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::two_hidden(5, 3).unwrap();
        let params = vec![0.0; spec.n_params()];
        assert_eq!(spec.forward(&params, &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_layer_is_affine() {
        let spec = MlpSpec::linear(3, 2).unwrap();
        // W = [[1,2,3],[4,5,6]], b = [0.5, -1]
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -1.0];
        let y = spec.forward(&params, &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 3.0 + 0.5, 4.0 - 6.0 - 1.0]);
    }

    #[test]
    fn linear_gradient_is_the_input() {
        let spec = MlpSpec::linear(3, 1).unwrap();
        let params = vec![0.3, -0.2, 0.9, 0.1];
        let g = spec.grad_params(&params, &[2.0, -1.0, 0.5], &[1.0]).unwrap();
        assert_eq!(g, vec![2.0, -1.0, 0.5, 1.0]);
        let g = spec.grad_params(&params, &[2.0, -1.0, 0.5], &[0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn width_checks() {
        assert!(MlpSpec::new(0, vec![4], 1).is_err());
        assert!(MlpSpec::new(2, vec![0], 1).is_err());
        let spec = MlpSpec::two_hidden(2, 1).unwrap();
        let params = vec![0.0; spec.n_params()];
        assert!(spec.forward(&params, &[1.0]).is_err());
        assert!(spec.forward(&params[1..], &[1.0, 2.0]).is_err());
        assert!(spec.grad_params(&params, &[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn glorot_init_bounds() {
        let spec = MlpSpec::new(4, vec![6], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = spec.init_params(&mut rng);
        assert_eq!(p.len(), spec.n_params());
        let a0 = (6.0f64 / 10.0).sqrt();
        assert!(p[..24].iter().all(|w| w.abs() <= a0));
        assert!(p[24..30].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut params = vec![1.0, 1.0, 1.0];
        adam.step(&mut params, &[0.5, -20.0, 0.0]).unwrap();
        assert!((params[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(params[2], 1.0);
        assert!(adam.step(&mut params, &[1.0]).is_err());
    }

    #[test]
    fn adam_two_step_trace() {
        // Hand computation, lr = 0.1, g1 = (1, -2), g2 = (3, 0).
        let mut adam = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[1.0, -2.0]).unwrap();
        adam.step(&mut p, &[3.0, 0.0]).unwrap();
        // coordinate 0: m2 = 0.09 + 0.3 = 0.39, v2 = 0.000999 + 0.009 = 0.009999
        let m_hat = 0.39 / (1.0 - 0.81);
        let v_hat: f64 = 0.009999 / (1.0 - 0.998001);
        let expect0: f64 = -0.1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        // coordinate 1: m2 = -0.18, v2 = 0.003996
        let m_hat = -0.18 / (1.0 - 0.81);
        let v_hat: f64 = 0.003996 / (1.0 - 0.998001);
        let expect1: f64 = 0.1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-7, "{} vs {}", p[0], expect0);
        assert!((p[1] - expect1).abs() < 1e-7, "{} vs {}", p[1], expect1);
    }

    #[test]
    fn save_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let approx = Approximator::new(MlpSpec::new(3, vec![4], 1).unwrap(), &mut rng);
        let text = approx.to_json().unwrap();
        assert_eq!(Approximator::from_json(&text).unwrap(), approx);
        let mut broken = approx.clone();
        broken.params.pop();
        assert!(Approximator::from_json(&broken.to_json().unwrap()).is_err());
    }
}
