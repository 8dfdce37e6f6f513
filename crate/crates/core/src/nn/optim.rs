use serde::{Deserialize, Serialize};

use super::NnError;
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    #[serde(rename = "gd")]
    GradientDescent,
    Momentum,
    Adagrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::GradientDescent,
        OptimizerKind::Momentum,
        OptimizerKind::Adagrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::GradientDescent => "gd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adagrad => "adagrad",
        }
    }
}

/// Bias-corrected ADAM moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_grads(params: &[Tensor], grads: &[Tensor]) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::GradientCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient {i} shape");
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient { index: i });
        }
    }
    Ok(())
}

/// One ADAM update. Parameters and state are untouched when a gradient is
/// non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    rate: f64,
) -> Result<(), NnError> {
    check_grads(params, grads)?;
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in params[i].data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= rate * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum OptimizerState {
    Adam(AdamState),
    GradientDescent,
    Momentum { velocity: Vec<Tensor>, mu: f64 },
    Adagrad { accum: Vec<Tensor>, eps: f64 },
}

/// First-order optimizer bound to one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || -> Vec<Tensor> {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        let state = match kind {
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(params)),
            OptimizerKind::GradientDescent => OptimizerState::GradientDescent,
            OptimizerKind::Momentum => OptimizerState::Momentum {
                velocity: zeros(),
                mu: 0.9,
            },
            OptimizerKind::Adagrad => OptimizerState::Adagrad {
                accum: zeros(),
                eps: 1e-8,
            },
        };
        Self { kind, state }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn adam(&self) -> Option<&AdamState> {
        match &self.state {
            OptimizerState::Adam(s) => Some(s),
            _ => None,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], rate: f64) -> Result<(), NnError> {
        match &mut self.state {
            OptimizerState::Adam(s) => adam_step(params, grads, s, rate),
            OptimizerState::GradientDescent => {
                check_grads(params, grads)?;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= rate * d;
                    }
                }
                Ok(())
            }
            OptimizerState::Momentum { velocity, mu } => {
                check_grads(params, grads)?;
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, d), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *v = *mu * *v + d;
                        *w -= rate * *v;
                    }
                }
                Ok(())
            }
            OptimizerState::Adagrad { accum, eps } => {
                check_grads(params, grads)?;
                for ((p, g), acc) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
                    for ((w, d), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                        *a += d * d;
                        *w -= rate * d / (a.sqrt() + *eps);
                    }
                }
                Ok(())
            }
        }
    }
}

/// Two-timescale piecewise-constant learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningSchedule {
    pub bsde_rate: f64,
    pub control_rate: f64,
    pub decay_factor: f64,
    pub decays: usize,
    pub total_iterations: usize,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        Self {
            bsde_rate: 1e-2,
            control_rate: 1e-3,
            decay_factor: 10.0,
            decays: 3,
            total_iterations: 1000,
        }
    }
}

impl LearningSchedule {
    pub fn new(total_iterations: usize) -> Self {
        Self {
            total_iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Schedule(m.to_string()));
        if !(self.bsde_rate > 0.0 && self.control_rate > 0.0) {
            return bad("rates must be positive");
        }
        if self.control_rate >= self.bsde_rate {
            return bad("control rate must be below the BSDE rate");
        }
        if !(self.decay_factor >= 1.0) {
            return bad("decay factor must be at least 1");
        }
        if self.total_iterations == 0 {
            return bad("total iterations must be positive");
        }
        Ok(())
    }

    /// Iterations at which a decay takes effect: `floor(k T / (decays + 1))`.
    pub fn decay_points(&self) -> Vec<usize> {
        (1..=self.decays)
            .map(|k| k * self.total_iterations / (self.decays + 1))
            .collect()
    }

    /// `(bsde_rate, control_rate)` in force at `iteration`.
    pub fn rate_at(&self, iteration: usize) -> (f64, f64) {
        let passed = self
            .decay_points()
            .into_iter()
            .filter(|&p| iteration >= p)
            .count();
        let div = self.decay_factor.powi(passed as i32);
        (self.bsde_rate / div, self.control_rate / div)
    }
}
