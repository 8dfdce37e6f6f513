//! Deep controlled second-order BSDE solver for Markovian control problems.
//!
//! A [`ControlProblem`] describes the controlled state
//! `dX = b(t, X, pi) dt + sigma(t, X, pi) dW` and its terminal gain. The
//! solver simulates `(X, V, Z)` forward with a network for the Hessian process
//! `Gamma` and a network for the control at every time step, then alternates
//!
//! 1. one step on `(v0, z0, Gamma nets)` against the terminal loss
//!    `E|V_N - g(X_N)|^2 + beta E|Z_N - D_x g(X_N)|^2`, and
//! 2. one step per control network against the Hamiltonian
//!    `F = b^T z + tr(sigma sigma^T Gamma)/2` at that time step,
//!
//! with the control rate strictly below the BSDE rate.

mod problems;
mod solver;
mod trace;

pub use problems::{Enforcement, HestonPrimal, HestonDual, UtilityDual, UtilityPrimal};
pub use solver::{
    forward_sweep, loss_l1, loss_l2, loss_l3, Bsde2Config, McEstimate, Solver2Bsde, Trajectories,
};
pub use trace::{read_checkpoint, write_checkpoint, SolverCheckpoint, TraceRow, TrainingTrace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::nn::NnError;
use crate::sde::SdeError;
use crate::utility::UtilitySpec;

#[derive(Debug, Error)]
pub enum Bsde2Error {
    #[error("non-finite {process} at step {step}")]
    NonFinite { process: &'static str, step: usize },
    #[error("diverged at iteration {iteration}: L1 = {loss}")]
    Divergence {
        iteration: usize,
        loss: f64,
        trace: TrainingTrace,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximise,
    Minimise,
}

/// A state coordinate whose starting point is itself optimised, as the dual
/// initial value `y0` is: minimise `E[U~(Y_N)] + y0 x0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeInitial {
    pub coordinate: usize,
    pub utility: UtilitySpec,
    pub x0: f64,
    pub initial_guess: f64,
}

/// State Jacobians of the coefficients at fixed control.
///
/// Row `r` of `drift` is the `d x d` matrix `db_j/dx_l` flattened row-major,
/// row `r` of `diffusion` the `(d n) x d` matrix `dsigma_{jc}/dx_l`, and
/// `gain` (when running gains are present) the `k x d` gradient of `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobians {
    pub drift: Tensor,
    pub diffusion: Tensor,
    pub gain: Option<Tensor>,
}

/// Controlled diffusion with a terminal gain.
///
/// Coefficient methods receive a `k x d` state node and a `k x m` control node
/// and return a `k x d` drift and a `k x (d n)` diffusion (each row a
/// row-major `d x n` matrix).
pub trait ControlProblem {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn direction(&self) -> Direction;
    fn initial_state(&self) -> Vec<f64>;
    fn name(&self) -> String;

    /// Coordinates simulated in log space; they must stay positive.
    fn geometric_coords(&self) -> Vec<usize> {
        Vec::new()
    }

    fn coefficients(&self, tape: &mut Tape, t: f64, x: NodeId, control: NodeId) -> (NodeId, NodeId);

    /// `(g(x), D_x g(x))` for one state.
    fn terminal(&self, x: &[f64]) -> (f64, Vec<f64>);

    /// Maps raw network output to an admissible control.
    fn control_map(&self, _tape: &mut Tape, raw: NodeId) -> NodeId {
        raw
    }

    /// Whether the control networks carry any freedom at all.
    fn trainable_control(&self) -> bool {
        true
    }

    /// Soft-constraint penalty per row (`k x 1`), subtracted from `F`.
    fn penalty(&self, _tape: &mut Tape, _control: NodeId) -> Option<NodeId> {
        None
    }

    /// Running gain `f(t, x, pi)` per row (`k x 1`).
    fn running_gain(&self, _tape: &mut Tape, _t: f64, _x: NodeId, _control: NodeId) -> Option<NodeId> {
        None
    }

    fn free_initial(&self) -> Option<FreeInitial> {
        None
    }

    fn state_jacobians(&self, t: f64, x: &Tensor, control: &Tensor) -> Jacobians {
        autodiff_jacobians(self, t, x, control)
    }
}

/// Drift and diffusion values at numeric inputs.
pub fn coefficients_value<P: ControlProblem + ?Sized>(
    problem: &P,
    t: f64,
    x: &Tensor,
    control: &Tensor,
) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let un = tape.constant(control.clone());
    let (b, s) = problem.coefficients(&mut tape, t, xn, un);
    (tape.value(b).clone(), tape.value(s).clone())
}

/// Running gain values (`k x 1`) at numeric inputs, if the problem has one.
pub fn running_gain_value<P: ControlProblem + ?Sized>(
    problem: &P,
    t: f64,
    x: &Tensor,
    control: &Tensor,
) -> Option<Tensor> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let un = tape.constant(control.clone());
    let f = problem.running_gain(&mut tape, t, xn, un)?;
    Some(tape.value(f).clone())
}

/// Admissible controls from raw network outputs.
pub fn control_map_value<P: ControlProblem + ?Sized>(problem: &P, raw: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let r = tape.constant(raw.clone());
    let u = problem.control_map(&mut tape, r);
    tape.value(u).clone()
}

/// State Jacobians by reverse-mode differentiation, one backward pass per
/// coefficient component. Rows are independent, so the gradient of a column
/// sum recovers every row's derivative at once.
pub fn autodiff_jacobians<P: ControlProblem + ?Sized>(
    problem: &P,
    t: f64,
    x: &Tensor,
    control: &Tensor,
) -> Jacobians {
    let (k, d) = x.shape();
    let n = problem.noise_dim();
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let un = tape.constant(control.clone());
    let (b, s) = problem.coefficients(&mut tape, t, xv, un);
    let f = problem.running_gain(&mut tape, t, xv, un);
    let column_grad = |tape: &mut Tape, node: NodeId, c: usize| -> Tensor {
        let sel = tape.select_cols(node, &[c]);
        let m = tape.mean(sel);
        let root = tape.scalar_mul(m, k as f64);
        tape.backward(root, &[xv])
            .ok()
            .and_then(|mut g| g.take_all(&[xv]).pop())
            .unwrap_or_else(|| Tensor::filled(k, d, f64::NAN))
    };
    let mut drift = Tensor::zeros(k, d * d);
    for j in 0..d {
        let g = column_grad(&mut tape, b, j);
        for r in 0..k {
            drift.row_mut(r)[j * d..(j + 1) * d].copy_from_slice(g.row(r));
        }
    }
    let mut diffusion = Tensor::zeros(k, d * n * d);
    for c in 0..d * n {
        let g = column_grad(&mut tape, s, c);
        for r in 0..k {
            diffusion.row_mut(r)[c * d..(c + 1) * d].copy_from_slice(g.row(r));
        }
    }
    let gain = f.map(|f| column_grad(&mut tape, f, 0));
    Jacobians {
        drift,
        diffusion,
        gain,
    }
}

/// `F = b^T z + tr(sigma sigma^T gamma)/2 (+ f)` per row; `gamma` is `k x d^2`.
pub fn hamiltonian_f<P: ControlProblem + ?Sized>(
    problem: &P,
    t: f64,
    x: &Tensor,
    control: &Tensor,
    z: &Tensor,
    gamma: &Tensor,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let un = tape.constant(control.clone());
    let zn = tape.constant(z.clone());
    let gn = tape.constant(gamma.clone());
    let f = hamiltonian_on_tape(problem, &mut tape, t, xn, un, zn, gn);
    tape.value(f).data().to_vec()
}

pub(crate) fn hamiltonian_on_tape<P: ControlProblem + ?Sized>(
    problem: &P,
    tape: &mut Tape,
    t: f64,
    x: NodeId,
    control: NodeId,
    z: NodeId,
    gamma: NodeId,
) -> NodeId {
    let d = problem.state_dim();
    let n = problem.noise_dim();
    let (b, s) = problem.coefficients(tape, t, x, control);
    let bz = tape.row_dot(b, z);
    // tr(sigma sigma^T gamma) = <sigma, gamma sigma> for symmetric gamma
    let gs = tape.row_matmul(gamma, s, d, d, n);
    let tr = tape.row_dot(s, gs);
    let half = tape.scalar_mul(tr, 0.5);
    let mut f = tape.add(bz, half);
    if let Some(g) = problem.running_gain(tape, t, x, control) {
        f = tape.add(f, g);
    }
    f
}

/// `D_x [b^T z + tr(sigma^T q) (+ f)]` per row by reverse-mode differentiation
/// in `x`; `q` is `k x (d n)`.
pub fn hamiltonian_h_grad<P: ControlProblem + ?Sized>(
    problem: &P,
    t: f64,
    x: &Tensor,
    control: &Tensor,
    z: &Tensor,
    q: &Tensor,
) -> Tensor {
    let k = x.rows();
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let un = tape.constant(control.clone());
    let zn = tape.constant(z.clone());
    let qn = tape.constant(q.clone());
    let (b, s) = problem.coefficients(&mut tape, t, xv, un);
    let bz = tape.row_dot(b, zn);
    let sq = tape.row_dot(s, qn);
    let mut h = tape.add(bz, sq);
    if let Some(g) = problem.running_gain(&mut tape, t, xv, un) {
        h = tape.add(h, g);
    }
    let m = tape.mean(h);
    let root = tape.scalar_mul(m, k as f64);
    let mut g = tape.backward(root, &[xv]).expect("finite Hamiltonian");
    g.take_all(&[xv]).pop().expect("gradient for x")
}

/// `D_x H` from precomputed Jacobians: `z^T J_b + q^T J_sigma (+ D_x f)`.
pub fn h_grad_from_jacobians(jac: &Jacobians, z: &Tensor, q: &Tensor, d: usize, n: usize) -> Tensor {
    let mut out = crate::autodiff::row_matmul(z, &jac.drift, 1, d, d);
    out.add_assign(&crate::autodiff::row_matmul(q, &jac.diffusion, 1, d * n, d));
    if let Some(g) = &jac.gain {
        out.add_assign(g);
    }
    out
}

/// Curvature of the Hamiltonian in the control at one state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HamiltonianShape {
    StrictlyConcave,
    StrictlyConvex,
    /// Affine in the control: no interior optimum on an unbounded set.
    Linear,
    Indefinite,
}

/// Classifies `pi -> F(t, x, pi, z, gamma)` around `pi` from second differences
/// along every control axis and every pair of axes.
pub fn classify_hamiltonian<P: ControlProblem + ?Sized>(
    problem: &P,
    t: f64,
    x: &[f64],
    pi: &[f64],
    z: &[f64],
    gamma: &[f64],
) -> HamiltonianShape {
    let m = pi.len();
    let mut probes = vec![pi.to_vec()];
    let mut dirs = Vec::new();
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        dirs.push(e);
        for j in i + 1..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            e[j] = 1.0;
            dirs.push(e);
        }
    }
    for dir in &dirs {
        for sgn in [1.0, -1.0] {
            probes.push(pi.iter().zip(dir).map(|(p, e)| p + sgn * e).collect());
        }
    }
    let k = probes.len();
    let xs = Tensor::from_vec(k, x.len(), x.repeat(k));
    let us = Tensor::from_vec(k, m, probes.concat());
    let zs = Tensor::from_vec(k, z.len(), z.repeat(k));
    let gs = Tensor::from_vec(k, gamma.len(), gamma.repeat(k));
    let f = hamiltonian_f(problem, t, &xs, &us, &zs, &gs);
    let scale = f.iter().map(|v| v.abs()).fold(1e-300, f64::max);
    let tol = 1e-10 * scale;
    let curv: Vec<f64> = (0..dirs.len())
        .map(|i| f[1 + 2 * i] + f[2 + 2 * i] - 2.0 * f[0])
        .collect();
    if curv.iter().all(|c| c.abs() <= tol) {
        HamiltonianShape::Linear
    } else if curv.iter().all(|c| *c < -tol) {
        HamiltonianShape::StrictlyConcave
    } else if curv.iter().all(|c| *c > tol) {
        HamiltonianShape::StrictlyConvex
    } else {
        HamiltonianShape::Indefinite
    }
}
