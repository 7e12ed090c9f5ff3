//! Small fully-connected regressor trained by full-batch gradient descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ScoringError;

/// Layer widths of the synthetic-experiment network: scalar in, two hidden
/// layers of ten units, scalar out.
pub const DEFAULT_WIDTHS: [usize; 4] = [1, 10, 10, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = self.biases[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            out.push(self.activation.apply(z));
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.biases.iter())
    }
}

/// Multilayer perceptron mapping a scalar feature to a scalar prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionPredictor {
    layers: Vec<DenseLayer>,
}

impl RegressionPredictor {
    /// Tanh hidden layers and a linear output, weights drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = 1.0 / (inputs as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                };
                let weights = draw(inputs * outputs);
                let biases = draw(outputs);
                DenseLayer {
                    inputs,
                    outputs,
                    weights,
                    biases,
                    activation: if i == last { Activation::Identity } else { Activation::Tanh },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn predict(&self, x: f64) -> f64 {
        let mut current = vec![x];
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward(&current, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        current[0]
    }

    pub fn mse(&self, xs: &[f64], ys: &[f64]) -> f64 {
        let sum: f64 = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let r = self.predict(x) - y;
                r * r
            })
            .sum();
        sum / xs.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|p| p.is_finite()))
    }

    /// One full-batch gradient step on the mean squared error. Returns the
    /// loss evaluated before the step.
    fn gradient_step(&mut self, xs: &[f64], ys: &[f64], learning_rate: f64) -> f64 {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
            .collect();
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        let mut delta = Vec::new();
        let mut prev_delta = Vec::new();
        let mut loss = 0.0;
        let scale = 2.0 / xs.len() as f64;

        for (&x, &y) in xs.iter().zip(ys) {
            activations[0].clear();
            activations[0].push(x);
            for (i, layer) in self.layers.iter().enumerate() {
                let (head, tail) = activations.split_at_mut(i + 1);
                layer.forward(&head[i], &mut tail[0]);
            }
            let residual = activations[self.layers.len()][0] - y;
            loss += residual * residual;

            delta.clear();
            delta.push(scale * residual);
            for (i, layer) in self.layers.iter().enumerate().rev() {
                let out = &activations[i + 1];
                for (d, a) in delta.iter_mut().zip(out) {
                    *d *= layer.activation.derivative_from_output(*a);
                }
                let input = &activations[i];
                let (gw, gb) = &mut grads[i];
                for o in 0..layer.outputs {
                    gb[o] += delta[o];
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += delta[o] * a;
                    }
                }
                if i > 0 {
                    prev_delta.clear();
                    prev_delta.resize(layer.inputs, 0.0);
                    for o in 0..layer.outputs {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev_delta.iter_mut().zip(row) {
                            *p += delta[o] * w;
                        }
                    }
                    std::mem::swap(&mut delta, &mut prev_delta);
                }
            }
        }

        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads) {
            for (w, g) in layer.weights.iter_mut().zip(gw) {
                *w -= learning_rate * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(gb) {
                *b -= learning_rate * g;
            }
        }
        loss / xs.len() as f64
    }
}

/// Hyperparameters for [`train_regressor_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS.to_vec(),
            epochs: 5000,
            learning_rate: 0.01,
        }
    }
}

/// Trains the default 1-10-10-1 network by full-batch gradient descent on MSE.
pub fn train_regressor(
    xs: &[f64],
    ys: &[f64],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<RegressionPredictor, ScoringError> {
    let config = TrainConfig {
        epochs,
        learning_rate,
        ..TrainConfig::default()
    };
    train_regressor_with(xs, ys, &config, seed)
}

pub fn train_regressor_with(
    xs: &[f64],
    ys: &[f64],
    config: &TrainConfig,
    seed: u64,
) -> Result<RegressionPredictor, ScoringError> {
    if xs.len() != ys.len() {
        return Err(ScoringError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(ScoringError::TooFewPoints(xs.len()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(ScoringError::InvalidParameter(format!(
            "learning rate {}",
            config.learning_rate
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(ScoringError::InvalidParameter("non-finite training data".into()));
    }

    let mut model = RegressionPredictor::init(&config.widths, seed);
    for epoch in 0..config.epochs {
        let loss = model.gradient_step(xs, ys, config.learning_rate);
        if !loss.is_finite() || !model.is_finite() {
            return Err(ScoringError::Diverged { epoch });
        }
    }
    if !model.mse(xs, ys).is_finite() {
        return Err(ScoringError::Diverged { epoch: config.epochs });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fits_constant_target() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 3.0).collect();
        let ys = vec![1.7; xs.len()];
        let model = train_regressor(&xs, &ys, 2000, 0.05, 1).unwrap();
        for &x in &xs {
            assert!((model.predict(x) - 1.7).abs() < 0.05, "x={x}");
        }
    }

    #[test]
    fn rejects_short_input() {
        assert!(matches!(
            train_regressor(&[0.0], &[1.0], 10, 0.01, 0),
            Err(ScoringError::TooFewPoints(1))
        ));
        assert!(matches!(
            train_regressor(&[0.0, 1.0], &[1.0, 2.0], 10, 0.0, 0),
            Err(ScoringError::InvalidParameter(_))
        ));
    }

    #[test]
    fn reports_divergence() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * 100.0).collect();
        assert!(matches!(
            train_regressor(&xs, &ys, 500, 10.0, 3),
            Err(ScoringError::Diverged { .. })
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 5.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let a = train_regressor(&xs, &ys, 200, 0.01, 42).unwrap();
        let b = train_regressor(&xs, &ys, 200, 0.01, 42).unwrap();
        assert_eq!(a, b);
        let c = train_regressor(&xs, &ys, 200, 0.01, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn loss_does_not_increase_over_training() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 6.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (1.0 + 0.1 * x) * x.sin()).collect();
        let start = RegressionPredictor::init(&DEFAULT_WIDTHS, 9).mse(&xs, &ys);
        let model = train_regressor(&xs, &ys, 1000, 0.01, 9).unwrap();
        assert!(model.mse(&xs, &ys) <= start);
    }

    /// Backprop gradient against centered finite differences of the loss.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = RegressionPredictor::init(&[1, 3, 2, 1], 11);
        let lr = 1e-3;
        let mut stepped = base.clone();
        stepped.gradient_step(&xs, &ys, lr);

        let h = 1e-6;
        for (li, layer) in base.layers.iter().enumerate() {
            for wi in 0..layer.weights.len() {
                let mut plus = base.clone();
                plus.layers[li].weights[wi] += h;
                let mut minus = base.clone();
                minus.layers[li].weights[wi] -= h;
                let fd = (plus.mse(&xs, &ys) - minus.mse(&xs, &ys)) / (2.0 * h);
                let analytic = (base.layers[li].weights[wi] - stepped.layers[li].weights[wi]) / lr;
                assert!((fd - analytic).abs() < 1e-6, "layer {li} w{wi}: {fd} vs {analytic}");
            }
            for bi in 0..layer.biases.len() {
                let mut plus = base.clone();
                plus.layers[li].biases[bi] += h;
                let mut minus = base.clone();
                minus.layers[li].biases[bi] -= h;
                let fd = (plus.mse(&xs, &ys) - minus.mse(&xs, &ys)) / (2.0 * h);
                let analytic = (base.layers[li].biases[bi] - stepped.layers[li].biases[bi]) / lr;
                assert!((fd - analytic).abs() < 1e-6, "layer {li} b{bi}");
            }
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = RegressionPredictor::init(&DEFAULT_WIDTHS, 0);
        assert_eq!(m.widths(), DEFAULT_WIDTHS.to_vec());
        for layer in &m.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            assert!(layer.params().all(|p| p.abs() <= bound));
        }
    }
}
