//! Feed-forward networks, input standardisation and first-order optimizers.

mod checkpoint;
mod optim;

pub use checkpoint::{read_binary, write_binary, NetworkRecord};
pub use optim::{adam_step, AdamState, LearningSchedule, Optimizer, OptimizerKind};

pub use crate::autodiff::Activation;
use crate::autodiff::{NodeId, Tape, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} columns, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient in parameter tensor {index}")]
    NonFiniteGradient { index: usize },
    #[error("gradient count {got} does not match parameter count {expected}")]
    GradientCount { expected: usize, got: usize },
    #[error("invalid learning schedule: {0}")]
    Schedule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of a fully connected network with `layers` hidden layers of
/// width `hidden`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl NetworkShape {
    /// Four hidden layers of width `input_dim + 10` with ReLU.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            layers: 4,
            hidden: input_dim + 10,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// `(L-1)l^2 + l(L+p+q) + q`.
    pub fn param_count(&self) -> usize {
        let (l, h, p, q) = (self.layers, self.hidden, self.input_dim, self.output_dim);
        (l - 1) * h * h + h * (l + p + q) + q
    }

    /// Shapes of the parameter tensors in storage order `M1, v1, ..., M_{L+1}, v_{L+1}`.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(2 * (self.layers + 1));
        let mut fan_in = self.input_dim;
        for _ in 0..self.layers {
            shapes.push((fan_in, self.hidden));
            shapes.push((1, self.hidden));
            fan_in = self.hidden;
        }
        shapes.push((fan_in, self.output_dim));
        shapes.push((1, self.output_dim));
        shapes
    }
}

/// Running mean/variance standardisation of the network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub initialised: bool,
}

const VAR_FLOOR: f64 = 1e-6;

impl InputNormalizer {
    /// Identity transform until the first training batch arrives.
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: 0.99,
            initialised: false,
        }
    }

    pub fn update(&mut self, batch: &Tensor) {
        let (k, p) = batch.shape();
        if k == 0 {
            return;
        }
        for c in 0..p {
            let mean = (0..k).map(|r| batch.get(r, c)).sum::<f64>() / k as f64;
            let var = (0..k).map(|r| (batch.get(r, c) - mean).powi(2)).sum::<f64>() / k as f64;
            if self.initialised {
                self.mean[c] = self.momentum * self.mean[c] + (1.0 - self.momentum) * mean;
                self.var[c] = self.momentum * self.var[c] + (1.0 - self.momentum) * var;
            } else {
                self.mean[c] = mean;
                self.var[c] = var;
            }
        }
        self.initialised = true;
    }

    fn scales(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / v.max(VAR_FLOOR).sqrt()).collect()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let scales = self.scales();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) * scales[c];
            }
        }
        out
    }
}

/// Multilayer perceptron `N_i = h(N_{i-1} M_i + 1 v_i)` with a linear output
/// layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardNetwork {
    shape: NetworkShape,
    params: Vec<Tensor>,
    normalizer: InputNormalizer,
}

impl FeedForwardNetwork {
    /// All parameters zero.
    pub fn zeros(shape: NetworkShape) -> Self {
        let params = shape
            .tensor_shapes()
            .into_iter()
            .map(|(r, c)| Tensor::zeros(r, c))
            .collect();
        Self {
            shape,
            params,
            normalizer: InputNormalizer::new(shape.input_dim),
        }
    }

    /// Gaussian weights with standard deviation `init_std`, zero biases.
    pub fn random<R: Rng + ?Sized>(shape: NetworkShape, init_std: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(shape);
        let normal = Normal::new(0.0, init_std).expect("finite init std");
        for (i, p) in net.params.iter_mut().enumerate() {
            if i % 2 == 0 {
                p.data_mut().iter_mut().for_each(|w| *w = normal.sample(rng));
            }
        }
        net
    }

    pub fn from_parts(
        shape: NetworkShape,
        params: Vec<Tensor>,
        normalizer: InputNormalizer,
    ) -> Result<Self, NnError> {
        let expected = shape.tensor_shapes();
        if params.len() != expected.len()
            || params.iter().zip(&expected).any(|(p, s)| p.shape() != *s)
        {
            return Err(NnError::Checkpoint(
                "parameter tensors do not match the network shape".into(),
            ));
        }
        if normalizer.mean.len() != shape.input_dim || normalizer.var.len() != shape.input_dim {
            return Err(NnError::Checkpoint("normaliser dimension mismatch".into()));
        }
        Ok(Self {
            shape,
            params,
            normalizer,
        })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn normalizer(&self) -> &InputNormalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut InputNormalizer {
        &mut self.normalizer
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the parameters on `tape` as variables.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Records the parameters on `tape` as constants.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Forward pass on a tape. In `train_mode` the normaliser first absorbs
    /// the batch statistics; otherwise its frozen statistics are used.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &[NodeId],
        input: NodeId,
        train_mode: bool,
    ) -> Result<NodeId, NnError> {
        let (_, p) = tape.shape(input);
        if p != self.shape.input_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.shape.input_dim,
                got: p,
            });
        }
        if train_mode {
            let batch = tape.value(input).clone();
            self.normalizer.update(&batch);
        }
        Ok(self.forward_frozen(tape, params, input))
    }

    /// Forward pass with frozen normalisation. Panics on a shape mismatch.
    pub fn forward_frozen(&self, tape: &mut Tape, params: &[NodeId], input: NodeId) -> NodeId {
        assert_eq!(tape.shape(input).1, self.shape.input_dim, "network input width");
        let scales = self.normalizer.scales();
        let x = if self.needs_scaling(&scales) {
            let p = self.shape.input_dim;
            let mut diag = Tensor::zeros(p, p);
            for (c, s) in scales.iter().enumerate() {
                diag.set(c, c, *s);
            }
            let shift: Vec<f64> = (0..p).map(|c| -self.normalizer.mean[c] * scales[c]).collect();
            let d = tape.constant(diag);
            let sh = tape.constant(Tensor::row_vector(&shift));
            let scaled = tape.matmul(input, d);
            tape.add_row(scaled, sh)
        } else {
            input
        };
        let mut h = x;
        let layers = self.shape.layers;
        for layer in 0..=layers {
            let w = params[2 * layer];
            let b = params[2 * layer + 1];
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if layer < layers {
                tape.activation(z, self.shape.activation)
            } else {
                z
            };
        }
        h
    }

    fn needs_scaling(&self, scales: &[f64]) -> bool {
        self.normalizer.mean.iter().any(|&m| m != 0.0) || scales.iter().any(|&s| s != 1.0)
    }

    /// Tape-free forward pass with frozen normalisation.
    pub fn eval(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.cols(), self.shape.input_dim, "network input width");
        let mut h = self.normalizer.apply(input);
        let layers = self.shape.layers;
        for layer in 0..=layers {
            let w = &self.params[2 * layer];
            let b = self.params[2 * layer + 1].data();
            let mut z = h.matmul(w);
            let act = self.shape.activation;
            for r in 0..z.rows() {
                for (v, bias) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                    if layer < layers {
                        *v = act.apply(*v);
                    }
                }
            }
            h = z;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_formula() {
        let shape = NetworkShape::new(1, 1);
        assert_eq!(shape.hidden, 11);
        assert_eq!(shape.param_count(), 430);
        let net = FeedForwardNetwork::zeros(shape);
        assert_eq!(net.param_count(), 430);
        for d in 1..6 {
            for q in 1..4 {
                let s = NetworkShape::new(d, q);
                let expected = 4 * d * d + 74 * d + 340 + q * (d + 11);
                assert_eq!(s.param_count(), expected);
                assert_eq!(FeedForwardNetwork::zeros(s).param_count(), expected);
            }
        }
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let shape = NetworkShape::new(3, 2);
        let mut net = FeedForwardNetwork::zeros(shape);
        let last = net.params_mut().len() - 1;
        net.params_mut()[last] = Tensor::row_vector(&[0.7, -1.3]);
        let batch = Tensor::from_vec(4, 3, (0..12).map(|i| i as f64).collect());
        let out = net.eval(&batch);
        for r in 0..4 {
            assert_eq!(out.row(r), &[0.7, -1.3]);
        }
        let mut tape = Tape::new();
        let ids = net.bind(&mut tape);
        let x = tape.constant(batch);
        let y = net.forward(&mut tape, &ids, x, false).unwrap();
        assert_eq!(tape.value(y), &out);
    }

    fn identity_net() -> FeedForwardNetwork {
        let shape = NetworkShape::new(1, 1);
        let mut net = FeedForwardNetwork::zeros(shape);
        let h = shape.hidden;
        let p = net.params_mut();
        p[0].set(0, 0, 1.0);
        p[0].set(0, 1, -1.0);
        for layer in 1..shape.layers {
            p[2 * layer].set(0, 0, 1.0);
            p[2 * layer].set(1, 1, 1.0);
        }
        let last = 2 * shape.layers;
        p[last] = Tensor::zeros(h, 1);
        p[last].set(0, 0, 1.0);
        p[last].set(1, 0, -1.0);
        net
    }

    #[test]
    fn constructed_identity() {
        let net = identity_net();
        let out = net.eval(&Tensor::scalar(2.5));
        assert_eq!(out.item(), 2.5);
        assert_eq!(net.eval(&Tensor::scalar(-4.0)).item(), -4.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut net = FeedForwardNetwork::zeros(NetworkShape::new(2, 1));
        let mut tape = Tape::new();
        let ids = net.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(3, 3));
        assert!(matches!(
            net.forward(&mut tape, &ids, x, false),
            Err(NnError::ShapeMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn relu_output_is_not_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FeedForwardNetwork::random(NetworkShape::new(1, 1), 1.0, &mut rng);
        let xs: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.5).collect();
        let out = net.eval(&Tensor::column(&xs));
        let (lo, hi) = out
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo < 0.0 || hi > 0.0);
        // piecewise linear with non-zero slope at the extremes keeps growing
        let far = net.eval(&Tensor::column(&[1e4, -1e4])).data().to_vec();
        let near = net.eval(&Tensor::column(&[1e3, -1e3])).data().to_vec();
        assert!(far[0].abs() > near[0].abs() || far[1].abs() > near[1].abs());
    }

    #[test]
    fn tape_and_direct_forward_agree_with_normaliser() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = FeedForwardNetwork::random(
            NetworkShape::new(2, 3).with_activation(Activation::Tanh),
            0.5,
            &mut rng,
        );
        let batch = Tensor::from_vec(3, 2, vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let mut tape = Tape::new();
        let ids = net.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let y = net.forward(&mut tape, &ids, x, true).unwrap();
        assert!(net.normalizer().initialised);
        let direct = net.eval(&batch);
        for (a, b) in tape.value(y).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        // frozen statistics: deterministic
        assert_eq!(net.eval(&batch), direct);
    }

    #[test]
    fn normaliser_running_statistics() {
        let mut n = InputNormalizer::new(1);
        n.update(&Tensor::column(&[1.0, 3.0]));
        assert_eq!(n.mean, vec![2.0]);
        assert_eq!(n.var, vec![1.0]);
        n.update(&Tensor::column(&[4.0, 4.0]));
        assert!((n.mean[0] - (0.99 * 2.0 + 0.01 * 4.0)).abs() < 1e-15);
        assert!((n.var[0] - 0.99).abs() < 1e-15);
    }
}
