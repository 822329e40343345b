//! Small dense network with hand-rolled forward/backward passes.
//!
//! Shared numerical core for the denoiser and the trainable victims. Hidden
//! layers use a smooth activation so gradients chained through downstream
//! consumers are differentiable everywhere; the output layer is linear.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Generator;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("backward called without a recorded forward pass")]
    BackwardWithoutForward,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training failure: {0}")]
    TrainingFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Dense feed-forward network. `widths = [in, h1, ..., out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Recorded intermediate values of one forward pass.
///
/// `Tape::default()` is the "no forward recorded" state; feeding it to
/// [`Mlp::backward`] is an error.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input to each layer (`inputs[0]` is the network input), plus the
    /// final output.
    inputs: Vec<DVector<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<DVector<f64>>,
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum()
    }
}

impl Mlp {
    /// Random initialization, weight std `1/sqrt(fan_in)`, zero biases.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Generator) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (1.0 / fan_in as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * std
                    }),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self { layers, activation }
    }

    /// All-zero parameters.
    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Self {
        Self { layers, activation }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * h + &layer.bias;
            h = if i == last { z } else { self.activate(z) };
        }
        h
    }

    /// Forward pass recording everything `backward` needs.
    pub fn forward_recorded(&self, x: &DVector<f64>, tape: &mut Tape) -> DVector<f64> {
        tape.inputs.clear();
        tape.pre.clear();
        tape.inputs.push(x.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * tape.inputs.last().unwrap() + &layer.bias;
            tape.pre.push(z.clone());
            let h = if i == last { z } else { self.activate(z) };
            tape.inputs.push(h);
        }
        tape.inputs.last().unwrap().clone()
    }

    /// Exact reverse-mode gradients of `upstream . output` with respect to
    /// all parameters and the input.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &DVector<f64>,
    ) -> Result<(Gradients, DVector<f64>), NetError> {
        if tape.pre.len() != self.layers.len() {
            return Err(NetError::BackwardWithoutForward);
        }
        if upstream.len() != self.output_dim() {
            return Err(NetError::ShapeMismatch(format!(
                "upstream has length {}, output dim is {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut g = upstream.clone(); // dL/d pre-activation of the current layer
        let mut input_grad = DVector::zeros(self.input_dim());
        for i in (0..self.layers.len()).rev() {
            grads.layers[i].weight = &g * tape.inputs[i].transpose();
            grads.layers[i].bias = g.clone();
            let back = self.layers[i].weight.transpose() * &g;
            if i == 0 {
                input_grad = back;
            } else {
                // inputs[i] = activation(pre[i-1])
                g = match self.activation {
                    Activation::Linear => back,
                    Activation::Tanh => {
                        back.zip_map(&tape.inputs[i], |b, h| b * (1.0 - h * h))
                    }
                };
            }
        }
        Ok((grads, input_grad))
    }

    fn activate(&self, z: DVector<f64>) -> DVector<f64> {
        match self.activation {
            Activation::Linear => z,
            Activation::Tanh => z.map(f64::tanh),
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn to_dump(&self) -> NetDump {
        NetDump {
            activation: match self.activation {
                Activation::Tanh => "tanh".into(),
                Activation::Linear => "linear".into(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerDump {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l
                        .weight
                        .row_iter()
                        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                        .collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_dump(dump: &NetDump) -> Result<Self, NetError> {
        let activation = match dump.activation.as_str() {
            "tanh" => Activation::Tanh,
            "linear" => Activation::Linear,
            other => {
                return Err(NetError::ShapeMismatch(format!(
                    "unknown activation '{other}'"
                )))
            }
        };
        let mut layers = Vec::with_capacity(dump.layers.len());
        for (i, l) in dump.layers.iter().enumerate() {
            if l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(NetError::ShapeMismatch(format!(
                    "layer {i} dump has inconsistent shapes"
                )));
            }
            layers.push(Layer {
                weight: DMatrix::from_row_slice(l.rows, l.cols, &l.weight),
                bias: DVector::from_vec(l.bias.clone()),
            });
        }
        if layers.is_empty() {
            return Err(NetError::ShapeMismatch("dump has no layers".into()));
        }
        Ok(Self { layers, activation })
    }
}

/// Serializable network parameters: shapes plus row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetDump {
    pub activation: String,
    pub layers: Vec<LayerDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDump {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

/// Adam state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(cfg: AdamConfig, net: &Mlp) -> Self {
        Self {
            cfg,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// Apply one update. `grads` may be pre-scaled by the caller (batch mean).
    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients) {
        let mut grads = grads.clone();
        if let Some(max_norm) = self.cfg.clip_norm {
            let norm = grads.squared_norm().sqrt();
            if norm > max_norm {
                grads.scale(max_norm / norm);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((layer, g), (m, v)) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            adam_slice(
                &self.cfg,
                bc1,
                bc2,
                layer.weight.as_mut_slice(),
                g.weight.as_slice(),
                m.weight.as_mut_slice(),
                v.weight.as_mut_slice(),
            );
            adam_slice(
                &self.cfg,
                bc1,
                bc2,
                layer.bias.as_mut_slice(),
                g.bias.as_slice(),
                m.bias.as_mut_slice(),
                v.bias.as_mut_slice(),
            );
        }
    }
}

pub(crate) fn adam_slice(
    cfg: &AdamConfig,
    bias_corr1: f64,
    bias_corr2: f64,
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bias_corr1;
        let v_hat = v[i] / bias_corr2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 2], Activation::Tanh);
        let out = net.forward(&DVector::from_vec(vec![1.0, -4.0, 0.5]));
        assert_eq!(out, DVector::zeros(2));
    }

    #[test]
    fn linear_net_gradient_is_matrix_product() {
        let mut rng = rng::from_seed(2);
        let net = Mlp::new(&[3, 4, 2], Activation::Linear, &mut rng);
        let x = DVector::from_vec(vec![0.3, -0.9, 1.7]);
        let mut tape = Tape::default();
        net.forward_recorded(&x, &mut tape);
        let u = DVector::from_vec(vec![1.0, -2.0]);
        let (_, input_grad) = net.backward(&tape, &u).unwrap();
        let expect =
            net.layers()[0].weight.transpose() * net.layers()[1].weight.transpose() * &u;
        assert!((input_grad - expect).norm() < 1e-14);
    }

    #[test]
    fn directional_derivative_matches_finite_difference() {
        let mut rng = rng::from_seed(5);
        let net = Mlp::new(&[4, 16, 16, 3], Activation::Tanh, &mut rng);
        let x = DVector::from_vec(vec![0.2, -0.4, 0.8, 1.1]);
        let u = DVector::from_vec(vec![0.7, -0.3, 0.5]);
        let mut tape = Tape::default();
        net.forward_recorded(&x, &mut tape);
        let (_, input_grad) = net.backward(&tape, &u).unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let dir = crate::rng::standard_normal(&mut rng, 4).normalize();
            let fp = net.forward(&(&x + &dir * h)).dot(&u);
            let fm = net.forward(&(&x - &dir * h)).dot(&u);
            let fd = (fp - fm) / (2.0 * h);
            let analytic = input_grad.dot(&dir);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
            assert!(rel <= 1e-5, "rel err {rel}");
        }
    }

    #[test]
    fn constant_head_has_zero_input_gradient() {
        let mut rng = rng::from_seed(9);
        let mut net = Mlp::new(&[3, 8, 2], Activation::Tanh, &mut rng);
        let last = net.layers_mut().len() - 1;
        net.layers_mut()[last].weight.fill(0.0);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::default();
        net.forward_recorded(&x, &mut tape);
        let (grads, input_grad) = net
            .backward(&tape, &DVector::from_vec(vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(input_grad, DVector::zeros(3));
        assert_eq!(grads.layers[0].weight.amax(), 0.0);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let net = Mlp::zeros(&[2, 2], Activation::Linear);
        let err = net.backward(&Tape::default(), &DVector::zeros(2));
        assert!(matches!(err, Err(NetError::BackwardWithoutForward)));
    }

    /// Gradient check for every shipped activation/layer configuration:
    /// cosine similarity of the full analytic parameter gradient against
    /// finite differences must be at least 0.99999.
    #[test]
    fn parameter_gradient_check_all_configs() {
        for (activation, widths) in [
            (Activation::Tanh, vec![3, 8, 8, 2]),
            (Activation::Tanh, vec![2, 5, 1]),
            (Activation::Linear, vec![3, 4, 2]),
            (Activation::Linear, vec![4, 3]),
        ] {
            let mut rng = rng::from_seed(13);
            let net = Mlp::new(&widths, activation, &mut rng);
            let x = crate::rng::standard_normal(&mut rng, widths[0]);
            let u = crate::rng::standard_normal(&mut rng, *widths.last().unwrap());
            let mut tape = Tape::default();
            net.forward_recorded(&x, &mut tape);
            let (grads, _) = net.backward(&tape, &u).unwrap();

            let h = 1e-6;
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for li in 0..net.layers().len() {
                for r in 0..net.layers()[li].weight.nrows() {
                    for c in 0..net.layers()[li].weight.ncols() {
                        analytic.push(grads.layers[li].weight[(r, c)]);
                        let mut plus = net.clone();
                        plus.layers_mut()[li].weight[(r, c)] += h;
                        let mut minus = net.clone();
                        minus.layers_mut()[li].weight[(r, c)] -= h;
                        numeric.push((plus.forward(&x).dot(&u) - minus.forward(&x).dot(&u)) / (2.0 * h));
                    }
                }
            }
            let dot: f64 = analytic.iter().zip(&numeric).map(|(a, b)| a * b).sum();
            let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
            let cos = dot / (na * nb);
            assert!(
                cos >= 0.99999,
                "cosine {cos} for {activation:?} {widths:?}"
            );
        }
    }

    #[test]
    fn adam_zero_lr_leaves_parameters_unchanged() {
        let mut rng = rng::from_seed(3);
        let mut net = Mlp::new(&[2, 4, 1], Activation::Tanh, &mut rng);
        let before = net.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &net,
        );
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].weight.fill(1.0);
        adam.update(&mut net, &grads);
        assert_eq!(net, before);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        // Single linear layer fit to a fixed target; loss must decrease.
        let mut rng = rng::from_seed(8);
        let mut net = Mlp::new(&[2, 1], Activation::Linear, &mut rng);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &net,
        );
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let target = 3.0;
        let loss = |n: &Mlp| (n.forward(&x)[0] - target).powi(2);
        let initial = loss(&net);
        for _ in 0..500 {
            let mut tape = Tape::default();
            let out = net.forward_recorded(&x, &mut tape);
            let upstream = DVector::from_vec(vec![2.0 * (out[0] - target)]);
            let (grads, _) = net.backward(&tape, &upstream).unwrap();
            adam.update(&mut net, &grads);
        }
        assert!(loss(&net) < initial * 1e-4);
    }
}
