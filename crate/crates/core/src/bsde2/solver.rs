use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{TraceRow, TrainingTrace};
use super::{
    coefficients_value, control_map_value, hamiltonian_on_tape, h_grad_from_jacobians, running_gain_value,
    Bsde2Error, ControlProblem, Direction,
};
use crate::autodiff::{block_transpose_index, row_matmul, NodeId, Tape, Tensor};
use crate::nn::{Activation, FeedForwardNetwork, LearningSchedule, NetworkShape, Optimizer, OptimizerKind};
use crate::sde::{log_euler_step, mean_se, splitmix64, Increments, TimeGrid};
use crate::utility::UtilitySpec;

/// Training configuration. `schedule.total_iterations` sets the run length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bsde2Config {
    pub horizon: f64,
    pub steps: usize,
    pub batch: usize,
    pub schedule: LearningSchedule,
    /// Weight of the `Z` terminal mismatch in `L1`.
    pub beta: f64,
    pub antithetic: bool,
    pub optimizer: OptimizerKind,
    pub activation: Activation,
    pub init_std: f64,
    /// Start `v0, z0` at `g(x0), D_x g(x0)` instead of zero.
    pub warm_start: bool,
    pub init_seed: u64,
    pub path_seed: u64,
    pub divergence_threshold: f64,
}

impl Default for Bsde2Config {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 20,
            batch: 64,
            schedule: LearningSchedule::default(),
            beta: 0.5,
            antithetic: true,
            optimizer: OptimizerKind::Adam,
            activation: Activation::Relu,
            init_std: 0.01,
            warm_start: false,
            init_seed: 1,
            path_seed: 2,
            divergence_threshold: 1e6,
        }
    }
}

impl Bsde2Config {
    pub fn validate(&self) -> Result<(), Bsde2Error> {
        let bad = |m: String| Err(Bsde2Error::Config(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || self.steps == 0 {
            return bad(format!("need T > 0 and N >= 1, got T = {} N = {}", self.horizon, self.steps));
        }
        if self.batch == 0 || (self.antithetic && self.batch % 2 == 1) {
            return bad(format!("batch {} must be positive and even with antithetic pairs", self.batch));
        }
        if !(self.beta >= 0.0) || !(self.init_std >= 0.0) {
            return bad("beta and init_std must be non-negative".into());
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence threshold must be positive".into());
        }
        self.schedule.validate().map_err(|e| Bsde2Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.horizon, self.steps).expect("validated grid")
    }

    /// Brownian batch of training iteration `iteration`.
    pub fn batch_increments(&self, noise_dim: usize, iteration: usize) -> Increments {
        let seed = splitmix64(self.path_seed.wrapping_add(iteration as u64));
        Increments::sample(seed, self.batch, self.steps, noise_dim, self.antithetic)
    }
}

/// Simulated processes along a batch; every entry has `N + 1` (states, `V`,
/// `Z`) or `N` (controls, `Gamma`) tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub x: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub z: Vec<Tensor>,
    /// Symmetrised `k x d^2`.
    pub gamma: Vec<Tensor>,
}

/// Monte-Carlo value of the learned control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    /// Mean of `g(X_N)` (plus `y0 x0` for dual runs).
    pub mean: f64,
    pub se: f64,
    /// Mean of `g(X_N) - (V_N - v0)` (plus `y0 x0`).
    pub mean_cv: f64,
    pub se_cv: f64,
    pub paths: usize,
}

/// Parameters of the deep controlled 2BSDE solver.
#[derive(Clone, Debug)]
pub struct Solver2Bsde {
    pub v0: f64,
    pub z0: Vec<f64>,
    /// Free initial value of the dual state.
    pub y0: Option<f64>,
    pub gamma_nets: Vec<FeedForwardNetwork>,
    pub control_nets: Vec<FeedForwardNetwork>,
    pub config: Bsde2Config,
    bsde_opt: Optimizer,
    y0_opt: Option<Optimizer>,
    control_opts: Vec<Optimizer>,
    iterations_done: usize,
}

fn symmetrise(tape: &mut Tape, a: NodeId, d: usize) -> NodeId {
    if d == 1 {
        return a;
    }
    let perm = tape.select_cols(a, &block_transpose_index(d, d));
    let s = tape.add(a, perm);
    tape.scalar_mul(s, 0.5)
}

fn symmetrise_value(a: &Tensor, d: usize) -> Tensor {
    if d == 1 {
        return a.clone();
    }
    let perm = a.select_cols(&block_transpose_index(d, d));
    a.zip_map(&perm, |x, y| 0.5 * (x + y))
}

const Y0_FLOOR: f64 = 1e-8;

impl Solver2Bsde {
    pub fn new<P: ControlProblem + ?Sized>(problem: &P, config: Bsde2Config) -> Result<Self, Bsde2Error> {
        config.validate()?;
        let d = problem.state_dim();
        let m = problem.control_dim();
        let x0 = problem.initial_state();
        if x0.len() != d {
            return Err(Bsde2Error::Config(format!("initial state has {} entries, d = {d}", x0.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let gshape = NetworkShape::new(d, d * d).with_activation(config.activation);
        let cshape = NetworkShape::new(d, m).with_activation(config.activation);
        let mut gamma_nets = Vec::with_capacity(config.steps);
        let mut control_nets = Vec::with_capacity(config.steps);
        for _ in 0..config.steps {
            gamma_nets.push(FeedForwardNetwork::random(gshape, config.init_std, &mut rng));
            control_nets.push(FeedForwardNetwork::random(cshape, config.init_std, &mut rng));
        }
        let y0 = problem.free_initial().map(|f| f.initial_guess.max(Y0_FLOOR));
        let mut start = x0;
        if let (Some(f), Some(y)) = (problem.free_initial(), y0) {
            start[f.coordinate] = y;
        }
        let (v0, z0) = if config.warm_start {
            problem.terminal(&start)
        } else {
            (0.0, vec![0.0; d])
        };
        let mut s = Self {
            v0,
            z0,
            y0,
            gamma_nets,
            control_nets,
            bsde_opt: Optimizer::new(config.optimizer, &[]),
            y0_opt: y0.map(|y| Optimizer::new(config.optimizer, &[Tensor::scalar(y)])),
            control_opts: Vec::new(),
            config,
            iterations_done: 0,
        };
        s.bsde_opt = Optimizer::new(s.config.optimizer, &s.bsde_params());
        s.control_opts = s
            .control_nets
            .iter()
            .map(|n| Optimizer::new(s.config.optimizer, n.params()))
            .collect();
        Ok(s)
    }

    /// Rebuilds a solver from stored parameters; optimizer moments restart.
    pub fn from_parts<P: ControlProblem + ?Sized>(
        problem: &P,
        config: Bsde2Config,
        v0: f64,
        z0: Vec<f64>,
        y0: Option<f64>,
        gamma_nets: Vec<FeedForwardNetwork>,
        control_nets: Vec<FeedForwardNetwork>,
    ) -> Result<Self, Bsde2Error> {
        let mut s = Self::new(problem, config)?;
        if gamma_nets.len() != s.gamma_nets.len() || control_nets.len() != s.control_nets.len() {
            return Err(Bsde2Error::Config("network count does not match N".into()));
        }
        if gamma_nets.iter().zip(&s.gamma_nets).any(|(a, b)| a.shape() != b.shape())
            || control_nets.iter().zip(&s.control_nets).any(|(a, b)| a.shape() != b.shape())
            || z0.len() != s.z0.len()
            || y0.is_some() != s.y0.is_some()
        {
            return Err(Bsde2Error::Config("stored parameters do not fit the problem".into()));
        }
        s.v0 = v0;
        s.z0 = z0;
        s.y0 = y0;
        s.gamma_nets = gamma_nets;
        s.control_nets = control_nets;
        s.bsde_opt = Optimizer::new(s.config.optimizer, &s.bsde_params());
        Ok(s)
    }

    /// `1 + d + N rho(d, d^2)`.
    pub fn bsde_param_count(&self) -> usize {
        1 + self.z0.len() + self.gamma_nets.iter().map(FeedForwardNetwork::param_count).sum::<usize>()
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    pub(super) fn set_iterations_done(&mut self, iterations: usize) {
        self.iterations_done = iterations;
    }

    /// `v0`, or the dual bound `v0 + y0 x0` on dual runs.
    pub fn value_at_zero<P: ControlProblem + ?Sized>(&self, problem: &P) -> f64 {
        match (problem.free_initial(), self.y0) {
            (Some(f), Some(y)) => self.v0 + y * f.x0,
            _ => self.v0,
        }
    }

    fn bsde_params(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::scalar(self.v0), Tensor::row_vector(&self.z0)];
        for net in &self.gamma_nets {
            out.extend(net.params().iter().cloned());
        }
        out
    }

    fn set_bsde_params(&mut self, params: Vec<Tensor>) {
        let mut it = params.into_iter();
        self.v0 = it.next().expect("v0").item();
        self.z0 = it.next().expect("z0").into_vec();
        for net in &mut self.gamma_nets {
            for p in net.params_mut() {
                *p = it.next().expect("gamma parameter");
            }
        }
    }

    /// Initial state with the free coordinate at the current `y0`.
    pub fn initial_state<P: ControlProblem + ?Sized>(&self, problem: &P) -> Vec<f64> {
        let mut s = problem.initial_state();
        if let (Some(f), Some(y)) = (problem.free_initial(), self.y0) {
            s[f.coordinate] = y;
        }
        s
    }

    /// State and control paths under the current control networks.
    fn simulate_states<P: ControlProblem + ?Sized>(
        &mut self,
        problem: &P,
        grid: &TimeGrid,
        inc: &Increments,
        update_norm: bool,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>), Bsde2Error> {
        let k = inc.paths();
        let start = self.initial_state(problem);
        let d = start.len();
        let geometric = problem.geometric_coords();
        let mut x = vec![Tensor::from_vec(k, d, start.repeat(k))];
        let mut u = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() {
            let xi = &x[i];
            // X_0 is deterministic: its batch variance is zero
            if update_norm && i > 0 {
                self.control_nets[i].normalizer_mut().update(xi);
                self.gamma_nets[i].normalizer_mut().update(xi);
            }
            let ui = control_map_value(problem, &self.control_nets[i].eval(xi));
            if !ui.is_finite() {
                return Err(Bsde2Error::NonFinite { process: "control", step: i });
            }
            let (b, s) = coefficients_value(problem, grid.t(i), xi, &ui);
            let next = log_euler_step(xi, &b, &s, grid.dt(i), inc.step(i), &geometric)?;
            if !next.is_finite() {
                return Err(Bsde2Error::NonFinite { process: "X", step: i + 1 });
            }
            u.push(ui);
            x.push(next);
        }
        Ok((x, u))
    }

    /// `(V, Z, Gamma)` along fixed state paths, without a tape.
    fn bsde_values<P: ControlProblem + ?Sized>(
        &self,
        problem: &P,
        grid: &TimeGrid,
        inc: &Increments,
        x: &[Tensor],
        u: &[Tensor],
    ) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>), Bsde2Error> {
        let k = inc.paths();
        let d = problem.state_dim();
        let n = problem.noise_dim();
        let mut v = vec![Tensor::filled(k, 1, self.v0)];
        let mut z = vec![Tensor::from_vec(k, d, self.z0.repeat(k))];
        let mut gammas = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() {
            let t = grid.t(i);
            let dt = grid.dt(i);
            let sq = dt.sqrt();
            let dw = inc.step(i);
            let (_, s) = coefficients_value(problem, t, &x[i], &u[i]);
            let gamma = symmetrise_value(&self.gamma_nets[i].eval(&x[i]), d);
            let q = row_matmul(&gamma, &s, d, d, n);
            let sdw = row_matmul(&s, dw, d, n, 1);
            let jac = problem.state_jacobians(t, &x[i], &u[i]);
            let dh = h_grad_from_jacobians(&jac, &z[i], &q, d, n);
            let qdw = row_matmul(&q, dw, d, n, 1);
            let f = running_gain_value(problem, t, &x[i], &u[i]);
            let mut vn = v[i].clone();
            for r in 0..k {
                let zs: f64 = z[i].row(r).iter().zip(sdw.row(r)).map(|(a, b)| a * b).sum();
                let fr = f.as_ref().map_or(0.0, |f| f.get(r, 0));
                vn.set(r, 0, v[i].get(r, 0) + sq * zs - dt * fr);
            }
            let mut zn = z[i].clone();
            for r in 0..k {
                for j in 0..d {
                    zn.set(r, j, z[i].get(r, j) - dt * dh.get(r, j) + sq * qdw.get(r, j));
                }
            }
            if !vn.is_finite() {
                return Err(Bsde2Error::NonFinite { process: "V", step: i + 1 });
            }
            if !zn.is_finite() {
                return Err(Bsde2Error::NonFinite { process: "Z", step: i + 1 });
            }
            v.push(vn);
            z.push(zn);
            gammas.push(gamma);
        }
        Ok((v, z, gammas))
    }

    /// One gradient step on `(v0, z0, Gamma nets)` against `L1`; returns `L1`.
    fn bsde_step<P: ControlProblem + ?Sized>(
        &mut self,
        problem: &P,
        grid: &TimeGrid,
        inc: &Increments,
        x: &[Tensor],
        u: &[Tensor],
        rate: f64,
    ) -> Result<f64, Bsde2Error> {
        let k = inc.paths();
        let d = problem.state_dim();
        let n = problem.noise_dim();
        let mut tape = Tape::new();
        let v0 = tape.var(Tensor::scalar(self.v0));
        let z0 = tape.var(Tensor::row_vector(&self.z0));
        let mut vars = vec![v0, z0];
        let mut v = tape.repeat_rows(v0, k);
        let mut z = tape.repeat_rows(z0, k);
        for i in 0..grid.steps() {
            let t = grid.t(i);
            let dt = grid.dt(i);
            let sq = dt.sqrt();
            let dw = inc.step(i);
            let (_, s) = coefficients_value(problem, t, &x[i], &u[i]);
            let jac = problem.state_jacobians(t, &x[i], &u[i]);
            let params = self.gamma_nets[i].bind(&mut tape);
            vars.extend(params.iter().copied());
            let xi = tape.constant(x[i].clone());
            let raw = self.gamma_nets[i].forward_frozen(&mut tape, &params, xi);
            let gamma = symmetrise(&mut tape, raw, d);
            let sn = tape.constant(s.clone());
            let q = tape.row_matmul(gamma, sn, d, d, n);
            let sdw = tape.constant(row_matmul(&s, dw, d, n, 1));
            let zs = tape.row_dot(z, sdw);
            let zs = tape.scalar_mul(zs, sq);
            v = tape.add(v, zs);
            if let Some(f) = running_gain_value(problem, t, &x[i], &u[i]) {
                let f = tape.constant(f.scale(-dt));
                v = tape.add(v, f);
            }
            let jb = tape.constant(jac.drift);
            let js = tape.constant(jac.diffusion);
            let mut dh = tape.row_matmul(z, jb, 1, d, d);
            let dq = tape.row_matmul(q, js, 1, d * n, d);
            dh = tape.add(dh, dq);
            if let Some(g) = jac.gain {
                let g = tape.constant(g);
                dh = tape.add(dh, g);
            }
            let dh = tape.scalar_mul(dh, -dt);
            let dwn = tape.constant(dw.clone());
            let qdw = tape.row_matmul(q, dwn, d, n, 1);
            let qdw = tape.scalar_mul(qdw, sq);
            let zn = tape.add(z, dh);
            z = tape.add(zn, qdw);
        }
        let (g, dg) = terminal_values(problem, &x[grid.steps()]);
        if !g.is_finite() || !dg.is_finite() {
            return Err(Bsde2Error::NonFinite {
                process: "terminal gain",
                step: grid.steps(),
            });
        }
        let loss = l1_on_tape(&mut tape, v, z, g, dg, self.config.beta);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        let mut grads = tape.backward(loss, &vars)?;
        let grads = grads.take_all(&vars);
        let mut params = self.bsde_params();
        self.bsde_opt.step(&mut params, &grads, rate)?;
        self.set_bsde_params(params);
        Ok(value)
    }

    /// One gradient step on `y0` against `L3`; returns `(L3, |dL3/dy0|)`.
    fn y0_step<P: ControlProblem + ?Sized>(
        &mut self,
        problem: &P,
        x: &[Tensor],
        rate: f64,
    ) -> Result<Option<(f64, f64)>, Bsde2Error> {
        let (Some(f), Some(y0)) = (problem.free_initial(), self.y0) else {
            return Ok(None);
        };
        let ratio = path_ratio(x, f.coordinate);
        let mut tape = Tape::new();
        let yv = tape.var(Tensor::scalar(y0));
        let loss = l3_on_tape(&mut tape, &ratio, yv, &f.utility, f.x0);
        let value = tape.value(loss).item();
        let mut g = tape.backward(loss, &[yv])?;
        let g = g.take_all(&[yv]);
        let opt = self.y0_opt.as_mut().expect("y0 optimizer");
        let mut p = [Tensor::scalar(y0)];
        opt.step(&mut p, &g, rate)?;
        self.y0 = Some(p[0].item().max(Y0_FLOOR));
        Ok(Some((value, g[0].item().abs())))
    }

    /// One gradient step per control network against the Hamiltonian with
    /// `Z, Gamma` frozen; returns `sum_i sum_theta |dL2_i/dtheta|`.
    fn control_step<P: ControlProblem + ?Sized>(
        &mut self,
        problem: &P,
        grid: &TimeGrid,
        x: &[Tensor],
        z: &[Tensor],
        gamma: &[Tensor],
        rate: f64,
    ) -> Result<f64, Bsde2Error> {
        let mut total = 0.0;
        for i in 0..grid.steps() {
            let mut tape = Tape::new();
            let params = self.control_nets[i].bind(&mut tape);
            let obj = l2_on_tape(problem, &mut tape, &self.control_nets[i], &params, grid.t(i), &x[i], &z[i], &gamma[i]);
            let loss = tape.neg(obj);
            let mut g = tape.backward(loss, &params)?;
            let g = g.take_all(&params);
            total += g.iter().map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>();
            self.control_opts[i].step(self.control_nets[i].params_mut(), &g, rate)?;
        }
        Ok(total)
    }

    /// Runs the configured number of iterations from a fresh initialisation.
    pub fn train<P: ControlProblem + ?Sized>(
        problem: &P,
        config: Bsde2Config,
    ) -> Result<(Self, TrainingTrace), Bsde2Error> {
        let mut solver = Self::new(problem, config)?;
        let total = solver.config.schedule.total_iterations;
        let mut trace = TrainingTrace::default();
        solver.train_iterations(problem, total, &mut trace)?;
        Ok((solver, trace))
    }

    /// Continues training for `count` iterations, appending to `trace`.
    /// Non-finite processes and losses above the threshold end the run with
    /// [`Bsde2Error::Divergence`] carrying the trace so far.
    pub fn train_iterations<P: ControlProblem + ?Sized>(
        &mut self,
        problem: &P,
        count: usize,
        trace: &mut TrainingTrace,
    ) -> Result<(), Bsde2Error> {
        let grid = self.config.grid();
        let clock = Instant::now();
        for _ in 0..count {
            let it = self.iterations_done;
            match self.train_once(problem, &grid, it) {
                Ok((l1, grad_norm, l3)) => {
                    self.iterations_done += 1;
                    trace.rows.push(TraceRow {
                        iteration: it,
                        l1,
                        control_grad_norm: grad_norm,
                        l3,
                        v0: self.value_at_zero(problem),
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                }
                Err(Bsde2Error::Divergence { loss, .. }) => {
                    return Err(Bsde2Error::Divergence {
                        iteration: it,
                        loss,
                        trace: trace.clone(),
                    })
                }
                Err(Bsde2Error::NonFinite { .. }) => {
                    return Err(Bsde2Error::Divergence {
                        iteration: it,
                        loss: f64::NAN,
                        trace: trace.clone(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// One iteration; returns `(L1, control gradient norm, L3)`.
    fn train_once<P: ControlProblem + ?Sized>(
        &mut self,
        problem: &P,
        grid: &TimeGrid,
        it: usize,
    ) -> Result<(f64, f64, Option<f64>), Bsde2Error> {
        let (bsde_rate, control_rate) = self.config.schedule.rate_at(it);
        assert!(control_rate < bsde_rate, "two-timescale rates");
        let inc = self.config.batch_increments(problem.noise_dim(), it);

        let (x, u) = self.simulate_states(problem, grid, &inc, true)?;
        let l1 = self.bsde_step(problem, grid, &inc, &x, &u, bsde_rate)?;
        if !l1.is_finite() || l1 > self.config.divergence_threshold {
            return Err(Bsde2Error::Divergence {
                iteration: it,
                loss: l1,
                trace: TrainingTrace::default(),
            });
        }
        let l3 = self.y0_step(problem, &x, bsde_rate)?;

        let grad_norm = if problem.trainable_control() {
            let (x, u) = if l3.is_some() {
                self.simulate_states(problem, grid, &inc, false)?
            } else {
                (x, u)
            };
            let (_, z, gamma) = self.bsde_values(problem, grid, &inc, &x, &u)?;
            self.control_step(problem, grid, &x, &z, &gamma, control_rate)?
        } else {
            l3.map_or(0.0, |l| l.1)
        };
        Ok((l1, grad_norm, l3.map(|l| l.0)))
    }

    /// Monte-Carlo estimate over `paths` fresh paths from `seed`, in chunks.
    pub fn evaluate<P: ControlProblem + ?Sized>(
        &self,
        problem: &P,
        paths: usize,
        seed: u64,
    ) -> Result<McEstimate, Bsde2Error> {
        const CHUNK: usize = 4096;
        let grid = self.config.grid();
        let antithetic = self.config.antithetic;
        let offset = match (problem.free_initial(), self.y0) {
            (Some(f), Some(y)) => y * f.x0,
            _ => 0.0,
        };
        let mut plain = Vec::with_capacity(paths);
        let mut cv = Vec::with_capacity(paths);
        let mut done = 0;
        let mut chunk_index = 0u64;
        while done < paths {
            let mut k = CHUNK.min(paths - done);
            if antithetic && k % 2 == 1 {
                k += 1;
            }
            let inc = Increments::sample(
                splitmix64(seed ^ chunk_index.wrapping_mul(0x9E37_79B9)),
                k,
                grid.steps(),
                problem.noise_dim(),
                antithetic,
            );
            let traj = self.sweep(problem, &grid, &inc)?;
            let (g, _) = terminal_values(problem, traj.x.last().expect("terminal state"));
            let vn = traj.v.last().expect("terminal V");
            for r in 0..k {
                plain.push(g.get(r, 0) + offset);
                cv.push(g.get(r, 0) - (vn.get(r, 0) - self.v0) + offset);
            }
            done += k;
            chunk_index += 1;
        }
        let (mean, se) = mean_se(&plain, antithetic);
        let (mean_cv, se_cv) = mean_se(&cv, antithetic);
        Ok(McEstimate {
            mean,
            se,
            mean_cv,
            se_cv,
            paths: plain.len(),
        })
    }

    fn sweep<P: ControlProblem + ?Sized>(
        &self,
        problem: &P,
        grid: &TimeGrid,
        inc: &Increments,
    ) -> Result<Trajectories, Bsde2Error> {
        let mut frozen = self.clone();
        let (x, u) = frozen.simulate_states(problem, grid, inc, false)?;
        let (v, z, gamma) = self.bsde_values(problem, grid, inc, &x, &u)?;
        Ok(Trajectories { x, u, v, z, gamma })
    }
}

fn terminal_values<P: ControlProblem + ?Sized>(problem: &P, xn: &Tensor) -> (Tensor, Tensor) {
    let (k, d) = xn.shape();
    let mut g = Tensor::zeros(k, 1);
    let mut dg = Tensor::zeros(k, d);
    for r in 0..k {
        let (gv, dv) = problem.terminal(xn.row(r));
        g.set(r, 0, gv);
        dg.row_mut(r).copy_from_slice(&dv);
    }
    (g, dg)
}

fn l1_on_tape(tape: &mut Tape, v: NodeId, z: NodeId, g: Tensor, dg: Tensor, beta: f64) -> NodeId {
    let g = tape.constant(g);
    let dg = tape.constant(dg);
    let ev = tape.sub(v, g);
    let ev = tape.square(ev);
    let ez = tape.sub(z, dg);
    let ez = tape.square(ez);
    let ez = tape.row_sum(ez);
    let ez = tape.scalar_mul(ez, beta);
    let tot = tape.add(ev, ez);
    tape.mean(tot)
}

fn path_ratio(x: &[Tensor], coord: usize) -> Tensor {
    let first = &x[0];
    let last = x.last().expect("terminal state");
    let k = last.rows();
    Tensor::from_vec(k, 1, (0..k).map(|r| last.get(r, coord) / first.get(r, coord)).collect())
}

fn l3_on_tape(tape: &mut Tape, ratio: &Tensor, y0: NodeId, utility: &UtilitySpec, x0: f64) -> NodeId {
    let ratio = tape.constant(ratio.clone());
    let yn = tape.matmul(ratio, y0);
    let u = utility.dual_on_tape(tape, yn);
    let m = tape.mean(u);
    let lin = tape.scalar_mul(y0, x0);
    tape.add(m, lin)
}

#[allow(clippy::too_many_arguments)]
fn l2_on_tape<P: ControlProblem + ?Sized>(
    problem: &P,
    tape: &mut Tape,
    net: &FeedForwardNetwork,
    params: &[NodeId],
    t: f64,
    x: &Tensor,
    z: &Tensor,
    gamma: &Tensor,
) -> NodeId {
    let xn = tape.constant(x.clone());
    let raw = net.forward_frozen(tape, params, xn);
    let u = problem.control_map(tape, raw);
    let zn = tape.constant(z.clone());
    let gn = tape.constant(gamma.clone());
    let f = hamiltonian_on_tape(problem, tape, t, xn, u, zn, gn);
    let mf = tape.mean(f);
    match problem.direction() {
        Direction::Maximise => match problem.penalty(tape, u) {
            Some(p) => {
                let mp = tape.mean(p);
                tape.sub(mf, mp)
            }
            None => mf,
        },
        Direction::Minimise => {
            let neg = tape.neg(mf);
            match problem.penalty(tape, u) {
                Some(p) => {
                    let mp = tape.mean(p);
                    tape.sub(neg, mp)
                }
                None => neg,
            }
        }
    }
}

/// Trajectories of the current solver along `inc`, with frozen normalisers.
pub fn forward_sweep<P: ControlProblem + ?Sized>(
    problem: &P,
    solver: &Solver2Bsde,
    inc: &Increments,
) -> Result<Trajectories, Bsde2Error> {
    let grid = solver.config.grid();
    if inc.num_steps() != grid.steps() || inc.dim() != problem.noise_dim() {
        return Err(Bsde2Error::Config(format!(
            "increments are {} steps x {} columns, need {} x {}",
            inc.num_steps(),
            inc.dim(),
            grid.steps(),
            problem.noise_dim()
        )));
    }
    solver.sweep(problem, &grid, inc)
}

/// `mean |V_N - g(X_N)|^2 + beta |Z_N - D_x g(X_N)|^2`.
pub fn loss_l1<P: ControlProblem + ?Sized>(problem: &P, traj: &Trajectories, beta: f64) -> f64 {
    let (g, dg) = terminal_values(problem, traj.x.last().expect("terminal state"));
    let vn = traj.v.last().expect("terminal V");
    let zn = traj.z.last().expect("terminal Z");
    let k = g.rows();
    let mut acc = 0.0;
    for r in 0..k {
        let ev = vn.get(r, 0) - g.get(r, 0);
        let ez: f64 = zn.row(r).iter().zip(dg.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
        acc += ev * ev + beta * ez;
    }
    acc / k as f64
}

/// Sample mean of `F` at step `i` (penalty subtracted), sign-flipped on
/// minimisation problems so that it is always maximised.
pub fn loss_l2<P: ControlProblem + ?Sized>(problem: &P, traj: &Trajectories, t: f64, step: usize) -> f64 {
    let mut tape = Tape::new();
    let u = tape.constant(traj.u[step].clone());
    let xn = tape.constant(traj.x[step].clone());
    let zn = tape.constant(traj.z[step].clone());
    let gn = tape.constant(traj.gamma[step].clone());
    let f = hamiltonian_on_tape(problem, &mut tape, t, xn, u, zn, gn);
    let mut obj = tape.mean(f);
    if problem.direction() == Direction::Minimise {
        obj = tape.neg(obj);
    }
    if let Some(p) = problem.penalty(&mut tape, u) {
        let mp = tape.mean(p);
        obj = tape.sub(obj, mp);
    }
    tape.value(obj).item()
}

/// `mean U~(y0 Y_N / Y_0) + x0 y0` with `Y` the free coordinate `coord`.
pub fn loss_l3(traj: &Trajectories, coord: usize, y0: f64, utility: &UtilitySpec, x0: f64) -> f64 {
    let ratio = path_ratio(&traj.x, coord);
    let mut tape = Tape::new();
    let y = tape.constant(Tensor::scalar(y0));
    let l = l3_on_tape(&mut tape, &ratio, y, utility, x0);
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde2::{Enforcement, UtilityDual, UtilityPrimal};
    use crate::constraint::{ConstraintSet, PenaltyConfig};
    use crate::sde::MarketCoefficients;

    fn power_primal(m: usize) -> UtilityPrimal {
        UtilityPrimal {
            market: MarketCoefficients::example1(7, m),
            utility: UtilitySpec::Power { p: 0.5 },
            constraint: ConstraintSet::Full { m },
            enforcement: Enforcement::default(),
            x0: 1.0,
        }
    }

    fn small_config(iterations: usize) -> Bsde2Config {
        Bsde2Config {
            horizon: 0.5,
            steps: 5,
            batch: 16,
            schedule: LearningSchedule::new(iterations),
            ..Default::default()
        }
    }

    #[test]
    fn bsde_group_dimension() {
        for (d, m) in [(1, 1), (1, 3)] {
            let p = power_primal(m);
            let s = Solver2Bsde::new(&p, small_config(1)).unwrap();
            let rho = NetworkShape::new(d, d * d).param_count();
            assert_eq!(s.bsde_param_count(), 1 + d + 5 * rho);
            assert_eq!(s.gamma_nets.len(), 5);
            assert_eq!(s.control_nets.len(), 5);
        }
        assert_eq!(NetworkShape::new(1, 1).param_count(), 430);
    }

    #[test]
    fn zero_nets_keep_v_constant() {
        let p = power_primal(2);
        let mut s = Solver2Bsde::new(&p, small_config(1)).unwrap();
        s.v0 = 0.7;
        for net in s.gamma_nets.iter_mut().chain(s.control_nets.iter_mut()) {
            for t in net.params_mut() {
                *t = Tensor::zeros(t.rows(), t.cols());
            }
        }
        let inc = Increments::sample(3, 16, 5, 2, true);
        let traj = forward_sweep(&p, &s, &inc).unwrap();
        for v in &traj.v {
            assert!(v.data().iter().all(|x| *x == 0.7));
        }
        // pi = 0: wealth grows at the riskless rate
        let r = p.market.r(0.0);
        for x in &traj.x[1..] {
            assert!(x.data().iter().all(|v| (v - x.get(0, 0)).abs() < 1e-15));
        }
        assert!((traj.x[5].get(0, 0) - (r * 0.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn v_telescopes_to_stochastic_integral() {
        let p = power_primal(2);
        let mut s = Solver2Bsde::new(&p, small_config(3)).unwrap();
        let mut trace = TrainingTrace::default();
        s.train_iterations(&p, 3, &mut trace).unwrap();
        s.z0 = vec![0.3];
        let inc = Increments::sample(9, 16, 5, 2, true);
        let traj = forward_sweep(&p, &s, &inc).unwrap();
        let grid = s.config.grid();
        for r in 0..16 {
            let mut acc = s.v0;
            for i in 0..5 {
                let (_, sig) = coefficients_value(&p, grid.t(i), &traj.x[i], &traj.u[i]);
                let sdw = row_matmul(&sig, inc.step(i), 1, 2, 1);
                acc += grid.dt(i).sqrt() * traj.z[i].get(r, 0) * sdw.get(r, 0);
            }
            assert!((traj.v[5].get(r, 0) - acc).abs() < 1e-13);
        }
    }

    #[test]
    fn tape_and_numeric_sweeps_agree() {
        let p = power_primal(2);
        let mut s = Solver2Bsde::new(&p, small_config(2)).unwrap();
        s.train_iterations(&p, 2, &mut TrainingTrace::default()).unwrap();
        let grid = s.config.grid();
        let inc = Increments::sample(4, 16, 5, 2, true);
        let traj = forward_sweep(&p, &s, &inc).unwrap();
        let numeric = loss_l1(&p, &traj, 0.5);
        let mut copy = s.clone();
        let rate_zero = 0.0;
        let on_tape = copy.bsde_step(&p, &grid, &inc, &traj.x, &traj.u, rate_zero).unwrap();
        assert!((numeric - on_tape).abs() <= 1e-12 * numeric.abs().max(1.0));
    }

    #[test]
    fn l1_examples() {
        let p = power_primal(1);
        let x = vec![Tensor::column(&[1.0, 4.0]), Tensor::column(&[1.0, 4.0])];
        let (g, dg) = terminal_values(&p, &x[1]);
        let traj = Trajectories {
            x: x.clone(),
            u: vec![Tensor::zeros(2, 1)],
            v: vec![Tensor::zeros(2, 1), g.clone()],
            z: vec![Tensor::zeros(2, 1), dg.clone()],
            gamma: vec![Tensor::zeros(2, 1)],
        };
        assert_eq!(loss_l1(&p, &traj, 0.5), 0.0);
        let shifted = Trajectories {
            v: vec![Tensor::zeros(2, 1), g.map(|v| v + 0.3)],
            ..traj.clone()
        };
        assert!((loss_l1(&p, &shifted, 0.5) - 0.09).abs() < 1e-15);
        let zshift = Trajectories {
            z: vec![Tensor::zeros(2, 1), dg.map(|v| v + 1.0)],
            ..traj.clone()
        };
        assert_eq!(loss_l1(&p, &zshift, 0.0), 0.0);
        assert!((loss_l1(&p, &zshift, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l2_penalty_display() {
        let market = MarketCoefficients::constant(0.0, &[0.0], &[vec![1.0]]).unwrap();
        let soft = UtilityPrimal {
            market,
            utility: UtilitySpec::Log,
            constraint: ConstraintSet::Ball { m: 1, radius: 1.0 },
            enforcement: Enforcement::Soft {
                penalty: PenaltyConfig { weight: 1000.0 },
            },
            x0: 1.0,
        };
        let hard = UtilityPrimal {
            enforcement: Enforcement::default(),
            ..soft.clone()
        };
        let traj = Trajectories {
            x: vec![Tensor::scalar(1.0)],
            u: vec![Tensor::scalar(2.0)],
            v: vec![],
            z: vec![Tensor::scalar(1.0)],
            gamma: vec![Tensor::scalar(-1.0)],
        };
        let with = loss_l2(&soft, &traj, 0.0, 0);
        let without = loss_l2(&hard, &traj, 0.0, 0);
        assert!((without - with - 1000.0).abs() < 1e-9);
        assert!((without + 2.0).abs() < 1e-15);
    }

    #[test]
    fn l2_stationary_at_scalar_optimum() {
        let p = UtilityPrimal {
            market: MarketCoefficients::constant(0.0, &[1.0], &[vec![1.0]]).unwrap(),
            ..power_primal(1)
        };
        let obj = |pi: f64| {
            let traj = Trajectories {
                x: vec![Tensor::scalar(1.0)],
                u: vec![Tensor::scalar(pi)],
                v: vec![],
                z: vec![Tensor::scalar(1.0)],
                gamma: vec![Tensor::scalar(-1.0)],
            };
            loss_l2(&p, &traj, 0.0, 0)
        };
        let h = 1e-5;
        assert!(((obj(1.0 + h) - obj(1.0 - h)) / (2.0 * h)).abs() < 1e-9);
        assert!((obj(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l3_log_toy_minimiser() {
        // Y_N = y0 e^{-rT}, U~(y) = -(1 + log y): L3 = -1 - log y0 + rT + x0 y0
        let (r, t, x0): (f64, f64, f64) = (0.05, 1.0, 2.0);
        let traj = Trajectories {
            x: vec![Tensor::scalar(1.0), Tensor::scalar((-r * t).exp())],
            u: vec![],
            v: vec![],
            z: vec![],
            gamma: vec![],
        };
        let l = |y: f64| loss_l3(&traj, 0, y, &UtilitySpec::Log, x0);
        let best = (1..2000).map(|i| i as f64 * 1e-3).min_by(|a, b| l(*a).partial_cmp(&l(*b)).unwrap()).unwrap();
        assert!((best - 1.0 / x0).abs() < 1e-3);
        assert!((l(0.5) - (-1.0 - 0.5f64.ln() + r * t + 1.0)).abs() < 1e-12);
        // power p = 1/2, r = 0: U~(y) = 1/y, minimiser 1/sqrt(x0)
        let flat = Trajectories {
            x: vec![Tensor::scalar(1.0), Tensor::scalar(1.0)],
            ..traj.clone()
        };
        let lp = |y: f64| loss_l3(&flat, 0, y, &UtilitySpec::Power { p: 0.5 }, x0);
        let best = (1..2000).map(|i| i as f64 * 1e-3).min_by(|a, b| lp(*a).partial_cmp(&lp(*b)).unwrap()).unwrap();
        assert!((best - x0.powf(-0.5)).abs() < 1e-3);
        // x0 = 0: decreasing in y0
        let l0 = |y: f64| loss_l3(&traj, 0, y, &UtilitySpec::Log, 0.0);
        assert!(l0(2.0) < l0(1.0) && l0(10.0) < l0(2.0));
    }

    #[test]
    fn zero_iterations_leave_state_unchanged() {
        let p = power_primal(2);
        let before = Solver2Bsde::new(&p, small_config(1)).unwrap();
        let mut after = before.clone();
        let mut trace = TrainingTrace::default();
        after.train_iterations(&p, 0, &mut trace).unwrap();
        assert!(trace.rows.is_empty());
        assert_eq!(before.v0, after.v0);
        assert_eq!(before.gamma_nets, after.gamma_nets);
        assert_eq!(before.control_nets, after.control_nets);
        assert_eq!(before.value_at_zero(&p), 0.0);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let p = power_primal(2);
        let run = || {
            let (s, t) = Solver2Bsde::train(&p, small_config(6)).unwrap();
            let rows: Vec<_> = t.rows.iter().map(|r| (r.l1, r.control_grad_norm, r.v0)).collect();
            (s.v0, rows)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.len(), 6);
    }

    #[test]
    fn dual_without_constraint_trains_y0_only() {
        let market = MarketCoefficients::constant(0.05, &[0.1], &[vec![0.2]]).unwrap();
        let d = UtilityDual {
            market,
            utility: UtilitySpec::Power { p: 0.5 },
            constraint: ConstraintSet::Full { m: 1 },
            rule: Default::default(),
            x0: 1.0,
        };
        let (s, trace) = Solver2Bsde::train(&d, small_config(5)).unwrap();
        let before = Solver2Bsde::new(&d, small_config(5)).unwrap();
        for (a, b) in s.control_nets.iter().zip(&before.control_nets) {
            assert_eq!(a.params(), b.params());
        }
        assert!(trace.rows.iter().all(|r| r.l3.is_some()));
        assert_ne!(s.y0, before.y0);
        assert_eq!(s.value_at_zero(&d), s.v0 + s.y0.unwrap());
    }
}
