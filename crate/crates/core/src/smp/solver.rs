use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MarketPaths, SmpError, SmpProblem, SmpTrace, SmpTraceRow, ValueBracket};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::nn::{
    read_binary, write_binary, Activation, FeedForwardNetwork, LearningSchedule, NetworkRecord, NetworkShape, NnError,
    Optimizer, OptimizerKind,
};
use crate::sde::{mean_se, splitmix64, Increments, TimeGrid};
use crate::utility::UtilitySpec;

const Y_FLOOR: f64 = 1e-8;
/// Lower clip of `Y(N)` inside the training losses.
const TERMINAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmpConfig {
    pub horizon: f64,
    pub steps: usize,
    pub batch: usize,
    /// Every parameter group uses `schedule.bsde_rate` and its decays.
    pub schedule: LearningSchedule,
    pub antithetic: bool,
    pub optimizer: OptimizerKind,
    pub activation: Activation,
    pub init_std: f64,
    pub init_seed: u64,
    pub path_seed: u64,
    pub divergence_threshold: f64,
}

impl Default for SmpConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 20,
            batch: 64,
            schedule: LearningSchedule::default(),
            antithetic: true,
            optimizer: OptimizerKind::Adam,
            activation: Activation::Relu,
            init_std: 0.01,
            init_seed: 1,
            path_seed: 2,
            divergence_threshold: 1e6,
        }
    }
}

impl SmpConfig {
    pub fn validate(&self) -> Result<(), SmpError> {
        let bad = |m: String| Err(SmpError::Config(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || self.steps == 0 {
            return bad(format!("need T > 0 and N >= 1, got T = {} N = {}", self.horizon, self.steps));
        }
        if self.batch == 0 || (self.antithetic && self.batch % 2 == 1) {
            return bad(format!("batch {} must be positive and even with antithetic pairs", self.batch));
        }
        if !(self.init_std >= 0.0) || !(self.divergence_threshold > 0.0) {
            return bad("init_std must be non-negative and the divergence threshold positive".into());
        }
        self.schedule.validate().map_err(|e| SmpError::Config(e.to_string()))
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.horizon, self.steps).expect("validated grid")
    }

    pub fn batch_increments(&self, noise_dim: usize, iteration: usize) -> Increments {
        let seed = splitmix64(self.path_seed.wrapping_add(iteration as u64));
        Increments::sample(seed, self.batch, self.steps, noise_dim, self.antithetic)
    }
}

/// Simulated dual processes; `y`, `p2` have `N + 1` entries, the rest `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmpTrajectories {
    pub y: Vec<Tensor>,
    pub p2: Vec<Tensor>,
    pub q2: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// `delta_K(v)`, `k x 1`.
    pub delta: Vec<Tensor>,
    /// Rows `(sigma^{-1} v)^T`.
    pub sigma_inv_v: Vec<Tensor>,
    /// Network inputs `(Y, features)`.
    pub inputs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SmpSolver {
    pub y: f64,
    pub q_nets: Vec<FeedForwardNetwork>,
    pub v_nets: Vec<FeedForwardNetwork>,
    pub config: SmpConfig,
    y_opt: Optimizer,
    q_opts: Vec<Optimizer>,
    v_opts: Vec<Optimizer>,
    iterations_done: usize,
}

fn net_input(y: &Tensor, features: &Tensor) -> Tensor {
    if features.cols() == 0 {
        y.clone()
    } else {
        Tensor::hcat(&[y, features])
    }
}

fn abs_sum(g: &[Tensor]) -> f64 {
    g.iter().map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>()).sum()
}

impl SmpSolver {
    pub fn new(problem: &SmpProblem, config: SmpConfig) -> Result<Self, SmpError> {
        config.validate()?;
        problem.validate()?;
        let shape = NetworkShape::new(problem.input_dim(), problem.market.traded_dim()).with_activation(config.activation);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut q_nets = Vec::with_capacity(config.steps);
        let mut v_nets = Vec::with_capacity(config.steps);
        for _ in 0..config.steps {
            q_nets.push(FeedForwardNetwork::random(shape, config.init_std, &mut rng));
            v_nets.push(FeedForwardNetwork::random(shape, config.init_std, &mut rng));
        }
        let (_, marginal, _) = problem
            .utility
            .u_eval(problem.x0)
            .map_err(|e| SmpError::Config(e.to_string()))?;
        let y = marginal.max(Y_FLOOR);
        let opt = |nets: &[FeedForwardNetwork]| nets.iter().map(|n| Optimizer::new(config.optimizer, n.params())).collect();
        Ok(Self {
            y,
            y_opt: Optimizer::new(config.optimizer, &[Tensor::scalar(y)]),
            q_opts: opt(&q_nets),
            v_opts: opt(&v_nets),
            q_nets,
            v_nets,
            config,
            iterations_done: 0,
        })
    }

    /// Rebuilds a solver from stored parameters; optimizer moments restart.
    pub fn from_parts(
        problem: &SmpProblem,
        config: SmpConfig,
        y: f64,
        q_nets: Vec<FeedForwardNetwork>,
        v_nets: Vec<FeedForwardNetwork>,
    ) -> Result<Self, SmpError> {
        let mut s = Self::new(problem, config)?;
        let fits = |a: &[FeedForwardNetwork], b: &[FeedForwardNetwork]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !fits(&q_nets, &s.q_nets) || !fits(&v_nets, &s.v_nets) {
            return Err(SmpError::Config("stored networks do not fit the problem".into()));
        }
        s.y = y;
        s.q_nets = q_nets;
        s.v_nets = v_nets;
        Ok(s)
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    /// Dual state, dual control and network inputs along `paths`. With
    /// `update`, every network's normaliser absorbs its input from step 1 on.
    fn dual_pass(
        &mut self,
        problem: &SmpProblem,
        grid: &TimeGrid,
        paths: &MarketPaths,
        update: bool,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>), SmpError> {
        let k = paths.traded.paths();
        let m = problem.market.traded_dim();
        let n = grid.steps();
        let mut y = vec![Tensor::filled(k, 1, self.y)];
        let (mut vs, mut deltas, mut sinv, mut inputs) = (vec![], vec![], vec![], vec![]);
        for i in 0..n {
            let input = net_input(&y[i], &paths.features[i]);
            if update && i > 0 {
                self.v_nets[i].normalizer_mut().update(&input);
                self.q_nets[i].normalizer_mut().update(&input);
            }
            let v = if problem.constraint.dual_is_trivial() {
                Tensor::zeros(k, m)
            } else {
                let raw = self.v_nets[i].eval(&input);
                let mut out = Tensor::zeros(k, m);
                for r in 0..k {
                    let row = problem.constraint.project_dual(raw.row(r), problem.rule);
                    out.row_mut(r).copy_from_slice(&row);
                }
                out
            };
            let mut delta = Tensor::zeros(k, 1);
            for r in 0..k {
                let d = problem.constraint.support(v.row(r));
                if !d.is_finite() {
                    return Err(SmpError::InfiniteSupport { step: i });
                }
                delta.set(r, 0, d);
            }
            let s = paths.vol[i].sigma_inv_value(&v);
            let (dt, rate) = (grid.dt(i), paths.rates[i]);
            let sq = dt.sqrt();
            let dw = paths.traded.step(i);
            let mut next = Tensor::zeros(k, 1);
            for r in 0..k {
                let load: f64 = (0..m).map(|j| (paths.theta[i].get(r, j) + s.get(r, j)) * dw.get(r, j)).sum();
                let yi = y[i].get(r, 0);
                next.set(r, 0, yi - dt * yi * (rate + delta.get(r, 0)) - sq * yi * load);
            }
            if !next.is_finite() {
                return Err(SmpError::NonFinite { process: "Y", step: i + 1 });
            }
            y.push(next);
            vs.push(v);
            deltas.push(delta);
            sinv.push(s);
            inputs.push(input);
        }
        Ok((y, vs, deltas, sinv, inputs))
    }

    /// Adjoint recursion on `tape`; `params[i]` binds `q_nets[i]`.
    fn p2_on_tape(
        &self,
        problem: &SmpProblem,
        tape: &mut Tape,
        params: &[Vec<NodeId>],
        grid: &TimeGrid,
        paths: &MarketPaths,
        inputs: &[Tensor],
    ) -> (Vec<NodeId>, Vec<NodeId>) {
        let k = paths.traded.paths();
        let mut p = vec![tape.constant(Tensor::filled(k, 1, problem.x0))];
        let mut q = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() {
            let inp = tape.constant(inputs[i].clone());
            let raw = self.q_nets[i].forward_frozen(tape, &params[i], inp);
            let h = problem.constraint.project_on_tape(tape, raw, problem.rule);
            let a = paths.vol[i].sigma_t_rows(tape, h);
            let qi = tape.scale_rows(a, p[i]);
            let theta = tape.constant(paths.theta[i].clone());
            let qt = tape.row_dot(qi, theta);
            let dw = tape.constant(paths.traded.step(i).clone());
            let qdw = tape.row_dot(qi, dw);
            let rp = tape.scalar_mul(p[i], paths.rates[i]);
            let drift = tape.add(rp, qt);
            let drift = tape.scalar_mul(drift, grid.dt(i));
            let noise = tape.scalar_mul(qdw, grid.dt(i).sqrt());
            let next = tape.add(p[i], drift);
            p.push(tape.add(next, noise));
            q.push(qi);
        }
        (p, q)
    }

    fn simulate(
        &mut self,
        problem: &SmpProblem,
        grid: &TimeGrid,
        paths: &MarketPaths,
        update: bool,
    ) -> Result<SmpTrajectories, SmpError> {
        let (y, v, delta, sigma_inv_v, inputs) = self.dual_pass(problem, grid, paths, update)?;
        let mut tape = Tape::new();
        let params: Vec<Vec<NodeId>> = self.q_nets.iter().map(|n| n.bind_constant(&mut tape)).collect();
        let (p, q) = self.p2_on_tape(problem, &mut tape, &params, grid, paths, &inputs);
        let p2: Vec<Tensor> = p.iter().map(|&id| tape.value(id).clone()).collect();
        let q2: Vec<Tensor> = q.iter().map(|&id| tape.value(id).clone()).collect();
        if let Some(i) = p2.iter().position(|t| !t.is_finite()) {
            return Err(SmpError::NonFinite { process: "P2", step: i });
        }
        Ok(SmpTrajectories {
            y,
            p2,
            q2,
            v,
            delta,
            sigma_inv_v,
            inputs,
        })
    }

    /// Samples the market along `inc`.
    pub fn sample_paths(&self, problem: &SmpProblem, inc: &Increments) -> Result<MarketPaths, SmpError> {
        Ok(problem.market.sample(&self.config.grid(), inc)?)
    }

    /// Processes along `paths` with frozen normalisers.
    pub fn trajectories(&self, problem: &SmpProblem, paths: &MarketPaths) -> Result<SmpTrajectories, SmpError> {
        self.clone().simulate(problem, &self.config.grid(), paths, false)
    }

    /// Number of (step, path) pairs with `P_2 > 0` at which
    /// `(sigma^T)^{-1} Q_2 / P_2` is outside `K` by more than `tol`.
    pub fn condition2_violations(
        &self,
        problem: &SmpProblem,
        traj: &SmpTrajectories,
        paths: &MarketPaths,
        tol: f64,
    ) -> usize {
        let mut bad = 0;
        for (i, q) in traj.q2.iter().enumerate() {
            let h = paths.vol[i].solve_sigma_t(q);
            for r in 0..h.rows() {
                let p = traj.p2[i].get(r, 0);
                if p <= 0.0 {
                    continue;
                }
                let row: Vec<f64> = h.row(r).iter().map(|x| x / p).collect();
                if !problem.constraint.contains(&row, tol) {
                    bad += 1;
                }
            }
        }
        bad
    }

    fn y_step(&mut self, problem: &SmpProblem, traj: &SmpTrajectories, rate: f64) -> Result<f64, SmpError> {
        let ratio = terminal_ratio(traj);
        let mut tape = Tape::new();
        let yv = tape.var(Tensor::scalar(self.y));
        let loss = loss_y_on_tape(&mut tape, &ratio, yv, &problem.utility, problem.x0);
        let value = tape.value(loss).item();
        let mut g = tape.backward(loss, &[yv])?;
        let g = g.take_all(&[yv]);
        let mut p = [Tensor::scalar(self.y)];
        self.y_opt.step(&mut p, &g, rate)?;
        self.y = p[0].item().max(Y_FLOOR);
        Ok(value)
    }

    fn q_step(
        &mut self,
        problem: &SmpProblem,
        grid: &TimeGrid,
        paths: &MarketPaths,
        traj: &SmpTrajectories,
        rate: f64,
    ) -> Result<f64, SmpError> {
        let mut tape = Tape::new();
        let params: Vec<Vec<NodeId>> = self.q_nets.iter().map(|n| n.bind(&mut tape)).collect();
        let (p, _) = self.p2_on_tape(problem, &mut tape, &params, grid, paths, &traj.inputs);
        let target = tape.constant(terminal_marginal(&problem.utility, traj.y.last().expect("terminal Y")));
        let pn = *p.last().expect("terminal P2");
        let diff = tape.add(pn, target);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        let flat: Vec<NodeId> = params.iter().flatten().copied().collect();
        let mut g = tape.backward(loss, &flat)?;
        for (i, ids) in params.iter().enumerate() {
            let grads = g.take_all(ids);
            self.q_opts[i].step(self.q_nets[i].params_mut(), &grads, rate)?;
        }
        Ok(value)
    }

    /// One step per `v` network; returns `(sum_i L^v_i, sum |grad|)`.
    fn v_step(
        &mut self,
        problem: &SmpProblem,
        paths: &MarketPaths,
        traj: &SmpTrajectories,
        rate: f64,
    ) -> Result<(f64, f64), SmpError> {
        let (mut total, mut norm) = (0.0, 0.0);
        for i in 0..self.v_nets.len() {
            let mut tape = Tape::new();
            let params = self.v_nets[i].bind(&mut tape);
            let inp = tape.constant(traj.inputs[i].clone());
            let raw = self.v_nets[i].forward_frozen(&mut tape, &params, inp);
            let v = problem.constraint.project_dual_on_tape(&mut tape, raw, problem.rule);
            let delta = problem.constraint.support_on_tape(&mut tape, v);
            let s = paths.vol[i].sigma_inv_rows(&mut tape, v);
            let p = tape.constant(traj.p2[i].clone());
            let q = tape.constant(traj.q2[i].clone());
            let pd = tape.mul(p, delta);
            let qs = tape.row_dot(q, s);
            let term = tape.add(pd, qs);
            let sq = tape.square(term);
            let loss = tape.mean(sq);
            total += tape.value(loss).item();
            let mut g = tape.backward(loss, &params)?;
            let g = g.take_all(&params);
            norm += abs_sum(&g);
            self.v_opts[i].step(self.v_nets[i].params_mut(), &g, rate)?;
        }
        Ok((total, norm))
    }

    pub fn train(problem: &SmpProblem, config: SmpConfig) -> Result<(Self, SmpTrace), SmpError> {
        let mut s = Self::new(problem, config)?;
        let total = s.config.schedule.total_iterations;
        let mut trace = SmpTrace::default();
        s.train_iterations(problem, total, &mut trace)?;
        Ok((s, trace))
    }

    /// Round-robin `y`, `Q_2` networks, `v` networks on one batch per
    /// iteration, resimulating between updates.
    pub fn train_iterations(&mut self, problem: &SmpProblem, count: usize, trace: &mut SmpTrace) -> Result<(), SmpError> {
        let grid = self.config.grid();
        let clock = Instant::now();
        for _ in 0..count {
            let it = self.iterations_done;
            match self.train_once(problem, &grid, it) {
                Ok((loss_y, loss_q, loss_v)) => {
                    self.iterations_done += 1;
                    trace.rows.push(SmpTraceRow {
                        iteration: it,
                        loss_y,
                        loss_q,
                        loss_v,
                        y: self.y,
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                }
                Err(SmpError::Divergence { loss, .. }) => {
                    return Err(SmpError::Divergence {
                        iteration: it,
                        loss,
                        trace: trace.clone(),
                    })
                }
                Err(SmpError::NonFinite { .. }) => {
                    return Err(SmpError::Divergence {
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

    /// One round of the three updates; returns `(L^y, L^Q, sum L^v)`.
    fn train_once(&mut self, problem: &SmpProblem, grid: &TimeGrid, it: usize) -> Result<(f64, f64, f64), SmpError> {
        let (rate, _) = self.config.schedule.rate_at(it);
        let inc = self.config.batch_increments(problem.market.noise_dim(), it);
        let paths = problem.market.sample(grid, &inc)?;

        let traj = self.simulate(problem, grid, &paths, true)?;
        let loss_y = self.y_step(problem, &traj, rate)?;

        let traj = self.simulate(problem, grid, &paths, false)?;
        let loss_q = self.q_step(problem, grid, &paths, &traj, rate)?;
        if !loss_q.is_finite() || loss_q > self.config.divergence_threshold {
            return Err(SmpError::Divergence {
                iteration: it,
                loss: loss_q,
                trace: SmpTrace::default(),
            });
        }

        let loss_v = if problem.constraint.dual_is_trivial() {
            0.0
        } else {
            let traj = self.simulate(problem, grid, &paths, false)?;
            self.v_step(problem, &paths, &traj, rate)?.0
        };
        Ok((loss_y, loss_q, loss_v))
    }

    /// Lower bound from `U(P_2(N))` and upper bound from `U~(Y(N)) + x0 y`
    /// over `paths` fresh paths from `seed`, in chunks.
    pub fn monte_carlo_bounds(&self, problem: &SmpProblem, paths: usize, seed: u64) -> Result<ValueBracket, SmpError> {
        const CHUNK: usize = 4096;
        let grid = self.config.grid();
        let antithetic = self.config.antithetic;
        let mut frozen = self.clone();
        let (mut low, mut high) = (Vec::with_capacity(paths), Vec::with_capacity(paths));
        let (mut excluded_low, mut excluded_high) = (0, 0);
        let mut done = 0;
        let mut chunk = 0u64;
        while done < paths {
            let mut k = CHUNK.min(paths - done);
            if antithetic && k % 2 == 1 {
                k += 1;
            }
            let inc = Increments::sample(
                splitmix64(seed ^ chunk.wrapping_mul(0x9E37_79B9)),
                k,
                grid.steps(),
                problem.market.noise_dim(),
                antithetic,
            );
            let mp = problem.market.sample(&grid, &inc)?;
            let traj = frozen.simulate(problem, &grid, &mp, false)?;
            let (pn, yn) = (traj.p2.last().expect("P2(N)"), traj.y.last().expect("Y(N)"));
            for r in 0..k {
                match problem.utility.u_eval(pn.get(r, 0)) {
                    Ok((u, _, _)) if pn.get(r, 0) > 0.0 => low.push(u),
                    _ => excluded_low += 1,
                }
                match problem.utility.dual_eval(yn.get(r, 0)) {
                    Ok((u, _)) if yn.get(r, 0) > 0.0 => high.push(u + problem.x0 * self.y),
                    _ => excluded_high += 1,
                }
            }
            done += k;
            chunk += 1;
        }
        let (u_low, se_low) = mean_se(&low, antithetic && excluded_low == 0);
        let (u_high, se_high) = mean_se(&high, antithetic && excluded_high == 0);
        Ok(ValueBracket {
            u_low,
            u_high,
            se_low,
            se_high,
            paths: done,
            excluded_low,
            excluded_high,
            steps: grid.steps(),
            horizon: grid.horizon(),
            y: self.y,
            init_seed: self.config.init_seed,
            path_seed: self.config.path_seed,
            eval_seed: seed,
        })
    }

    pub fn write_checkpoint(&self, dir: &Path, problem: &SmpProblem) -> Result<SmpCheckpoint, SmpError> {
        std::fs::create_dir_all(dir)?;
        let ck = SmpCheckpoint::capture(problem, self);
        serde_json::to_writer(BufWriter::new(File::create(dir.join("smp.json"))?), &ck)?;
        let mut w = BufWriter::new(File::create(dir.join("smp.bin"))?);
        ck.write_binary(&mut w)?;
        w.flush()?;
        Ok(ck)
    }
}

fn terminal_ratio(traj: &SmpTrajectories) -> Tensor {
    let (first, last) = (&traj.y[0], traj.y.last().expect("terminal Y"));
    Tensor::from_vec(
        last.rows(),
        1,
        (0..last.rows())
            .map(|r| (last.get(r, 0) / first.get(r, 0)).max(TERMINAL_FLOOR))
            .collect(),
    )
}

fn terminal_marginal(utility: &UtilitySpec, yn: &Tensor) -> Tensor {
    yn.map(|y| utility.dual_eval(y.max(TERMINAL_FLOOR)).map(|(_, d)| d).unwrap_or(f64::NAN))
}

fn loss_y_on_tape(tape: &mut Tape, ratio: &Tensor, y: NodeId, utility: &UtilitySpec, x0: f64) -> NodeId {
    let ratio = tape.constant(ratio.clone());
    let yn = tape.matmul(ratio, y);
    let u = utility.dual_on_tape(tape, yn);
    let m = tape.mean(u);
    let lin = tape.scalar_mul(y, x0);
    tape.add(m, lin)
}

/// `mean U~(Y(N)) + x0 y` with `Y` rescaled to start at `y`.
pub fn loss_y(traj: &SmpTrajectories, y: f64, utility: &UtilitySpec, x0: f64) -> f64 {
    let ratio = terminal_ratio(traj);
    let mut tape = Tape::new();
    let yn = tape.constant(Tensor::scalar(y));
    let l = loss_y_on_tape(&mut tape, &ratio, yn, utility, x0);
    tape.value(l).item()
}

/// `mean |U~'(Y(N)) + P_2(N)|^2`.
pub fn loss_q(traj: &SmpTrajectories, utility: &UtilitySpec) -> f64 {
    let target = terminal_marginal(utility, traj.y.last().expect("terminal Y"));
    let pn = traj.p2.last().expect("terminal P2");
    target.zip_map(pn, |a, b| (a + b).powi(2)).mean()
}

/// `mean |P_2(i) delta_K(v(i)) + Q_2(i)^T sigma^{-1} v(i)|^2`.
pub fn loss_v(traj: &SmpTrajectories, step: usize) -> f64 {
    let (p, d, q, s) = (&traj.p2[step], &traj.delta[step], &traj.q2[step], &traj.sigma_inv_v[step]);
    let k = p.rows();
    (0..k)
        .map(|r| {
            let qs: f64 = q.row(r).iter().zip(s.row(r)).map(|(a, b)| a * b).sum();
            (p.get(r, 0) * d.get(r, 0) + qs).powi(2)
        })
        .sum::<f64>()
        / k as f64
}

/// Stored SMP parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpCheckpoint {
    pub problem: String,
    pub config: SmpConfig,
    pub iterations: usize,
    pub y: f64,
    pub q_nets: Vec<NetworkRecord>,
    pub v_nets: Vec<NetworkRecord>,
}

impl SmpCheckpoint {
    pub fn capture(problem: &SmpProblem, s: &SmpSolver) -> Self {
        Self {
            problem: problem.name(),
            config: s.config.clone(),
            iterations: s.iterations_done,
            y: s.y,
            q_nets: s.q_nets.iter().map(NetworkRecord::from).collect(),
            v_nets: s.v_nets.iter().map(NetworkRecord::from).collect(),
        }
    }

    pub fn restore(self, problem: &SmpProblem) -> Result<SmpSolver, SmpError> {
        let nets = |v: Vec<NetworkRecord>| v.into_iter().map(NetworkRecord::into_network).collect::<Result<Vec<_>, _>>();
        let q = nets(self.q_nets)?;
        let v = nets(self.v_nets)?;
        let mut s = SmpSolver::from_parts(problem, self.config, self.y, q, v)?;
        s.iterations_done = self.iterations;
        Ok(s)
    }

    pub fn read(dir: &Path) -> Result<Self, SmpError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(dir.join("smp.json"))?))?)
    }

    /// Magic `SMP1`, `u64` N, `f64` y, then the `Q_2` and `v` networks in
    /// network binary form.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), SmpError> {
        w.write_all(b"SMP1")?;
        w.write_all(&(self.q_nets.len() as u64).to_le_bytes())?;
        w.write_all(&self.y.to_le_bytes())?;
        for rec in self.q_nets.iter().chain(&self.v_nets) {
            write_binary(&rec.clone().into_network()?, &mut w)?;
        }
        Ok(())
    }

    /// Parameters from [`SmpCheckpoint::write_binary`]; other fields from `meta`.
    pub fn read_binary<R: Read>(mut r: R, meta: &SmpCheckpoint) -> Result<Self, SmpError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SMP1" {
            return Err(NnError::Checkpoint("not an SMP checkpoint".into()).into());
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let steps = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let y = f64::from_le_bytes(word);
        let mut nets = |n: usize| -> Result<Vec<NetworkRecord>, SmpError> {
            (0..n).map(|_| Ok(NetworkRecord::from(&read_binary(&mut r)?))).collect()
        };
        let q_nets = nets(steps)?;
        let v_nets = nets(steps)?;
        Ok(Self {
            y,
            q_nets,
            v_nets,
            ..meta.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::ConstraintSet;
    use crate::sde::{HestonParams, MarketCoefficients};
    use crate::smp::RandomMarket;

    fn bs_problem(constraint: ConstraintSet, utility: UtilitySpec) -> SmpProblem {
        let m = constraint.dim();
        let coefficients = MarketCoefficients::constant(
            0.05,
            &vec![0.08; m],
            &(0..m)
                .map(|i| (0..m).map(|j| if i == j { 0.3 } else { 0.05 }).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        SmpProblem::new(RandomMarket::Deterministic { coefficients }, utility, constraint, 1.0)
    }

    fn config(steps: usize, iterations: usize) -> SmpConfig {
        SmpConfig {
            horizon: 0.5,
            steps,
            batch: 16,
            schedule: LearningSchedule::new(iterations),
            ..Default::default()
        }
    }

    fn zero_nets(s: &mut SmpSolver) {
        for net in s.q_nets.iter_mut().chain(s.v_nets.iter_mut()) {
            for p in net.params_mut() {
                *p = Tensor::zeros(p.rows(), p.cols());
            }
        }
    }

    #[test]
    fn zero_nets_give_bond_growth() {
        let problem = bs_problem(ConstraintSet::Full { m: 2 }, UtilitySpec::Power { p: 0.5 });
        let mut s = SmpSolver::new(&problem, config(5, 1)).unwrap();
        zero_nets(&mut s);
        let inc = s.config.batch_increments(2, 0);
        let paths = s.sample_paths(&problem, &inc).unwrap();
        let traj = s.trajectories(&problem, &paths).unwrap();
        let expect = (1.0 + 0.05 * 0.1f64).powi(5);
        for r in 0..16 {
            assert!((traj.p2[5].get(r, 0) - expect).abs() < 1e-14);
            assert_eq!(traj.q2[3].row(r), &[0.0, 0.0]);
        }
        assert!(traj.v.iter().all(|v| v.max_abs() == 0.0));
    }

    #[test]
    fn one_step_dual_state() {
        let c = MarketCoefficients::constant(0.05, &[0.05], &[vec![1.0]]).unwrap();
        let problem = SmpProblem::new(
            RandomMarket::Deterministic { coefficients: c },
            UtilitySpec::Log,
            ConstraintSet::Full { m: 1 },
            1.0,
        );
        let s = SmpSolver::new(&problem, SmpConfig { steps: 1, horizon: 0.2, ..config(1, 1) }).unwrap();
        let inc = s.config.batch_increments(1, 0);
        let paths = s.sample_paths(&problem, &inc).unwrap();
        let traj = s.trajectories(&problem, &paths).unwrap();
        for r in 0..16 {
            assert!((traj.y[1].get(r, 0) - s.y * (1.0 - 0.05 * 0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn dual_state_is_linear_in_y() {
        let problem = bs_problem(ConstraintSet::Full { m: 3 }, UtilitySpec::Log);
        let mut s = SmpSolver::new(&problem, config(4, 1)).unwrap();
        let inc = s.config.batch_increments(3, 0);
        let paths = s.sample_paths(&problem, &inc).unwrap();
        let a = s.trajectories(&problem, &paths).unwrap();
        s.y *= 2.0;
        let b = s.trajectories(&problem, &paths).unwrap();
        for i in 0..=4 {
            assert_eq!(a.y[i].scale(2.0), b.y[i]);
        }
    }

    #[test]
    fn condition_two_holds_by_construction() {
        for (c, rule) in [
            (ConstraintSet::Cone { m: 3 }, crate::constraint::ProjectionRule::Square),
            (ConstraintSet::Cone { m: 3 }, crate::constraint::ProjectionRule::Max),
            (ConstraintSet::Ball { m: 3, radius: 0.01 }, crate::constraint::ProjectionRule::Max),
        ] {
            let mut problem = bs_problem(c, UtilitySpec::Log);
            problem.rule = rule;
            let cfg = SmpConfig { init_std: 0.1, ..config(4, 1) };
            let s = SmpSolver::new(&problem, cfg).unwrap();
            let inc = s.config.batch_increments(3, 0);
            let paths = s.sample_paths(&problem, &inc).unwrap();
            let traj = s.trajectories(&problem, &paths).unwrap();
            assert_eq!(s.condition2_violations(&problem, &traj, &paths, 1e-10), 0);
            assert!(traj.q2.iter().any(|q| q.max_abs() > 1e-8));
            // the check itself catches a loading outside K
            let mut bad = traj.clone();
            bad.q2[0] = bad.q2[0].map(|_| -5.0);
            assert!(s.condition2_violations(&problem, &bad, &paths, 1e-10) > 0);
        }
    }

    fn traj_stub(y: Vec<f64>, p2: Vec<f64>) -> SmpTrajectories {
        let k = y.len();
        SmpTrajectories {
            y: vec![Tensor::filled(k, 1, 1.0), Tensor::column(&y)],
            p2: vec![Tensor::filled(k, 1, 1.0), Tensor::column(&p2)],
            q2: vec![Tensor::zeros(k, 1)],
            v: vec![Tensor::zeros(k, 1)],
            delta: vec![Tensor::zeros(k, 1)],
            sigma_inv_v: vec![Tensor::zeros(k, 1)],
            inputs: vec![Tensor::zeros(k, 1)],
        }
    }

    #[test]
    fn loss_q_examples() {
        let u = UtilitySpec::Power { p: 0.5 };
        let y = vec![0.5, 1.0, 2.0];
        // P_2(N) = -U~'(Y_N) = Y_N^{-2}
        let exact: Vec<f64> = y.iter().map(|v: &f64| v.powi(-2)).collect();
        assert!(loss_q(&traj_stub(y.clone(), exact.clone()), &u) < 1e-28);
        let off: Vec<f64> = exact.iter().map(|v| v + 0.3).collect();
        assert!((loss_q(&traj_stub(y, off), &u) - 0.09).abs() < 1e-14);
    }

    #[test]
    fn loss_y_examples() {
        // deterministic Y_N = y e^{-rT}: log minimiser 1/x0, power p=1/2 minimiser x0^{-1/2} e^{rT/2}
        let ratio = (-0.05f64 * 0.5).exp();
        let t = traj_stub(vec![ratio; 4], vec![1.0; 4]);
        let min_of = |u: UtilitySpec, x0: f64| {
            let mut best = (f64::INFINITY, 0.0);
            for i in 1..200_000 {
                let y = i as f64 * 1e-5;
                let l = loss_y(&t, y, &u, x0);
                if l < best.0 {
                    best = (l, y);
                }
            }
            best.1
        };
        assert!((min_of(UtilitySpec::Log, 2.0) - 0.5).abs() < 2e-5);
        let expect = 2.0f64.powf(-0.5) * (0.05f64 * 0.5 * 0.5).exp();
        assert!((min_of(UtilitySpec::Power { p: 0.5 }, 2.0) - expect).abs() < 2e-5);
        // U~ decreasing: smaller terminal states cost more
        let lower = traj_stub(vec![0.5 * ratio; 4], vec![1.0; 4]);
        assert!(loss_y(&lower, 1.0, &UtilitySpec::Log, 1.0) > loss_y(&t, 1.0, &UtilitySpec::Log, 1.0));
    }

    #[test]
    fn loss_v_examples() {
        let mut t = traj_stub(vec![1.0; 2], vec![1.0; 2]);
        assert_eq!(loss_v(&t, 0), 0.0);
        // P2 R|v| + Q2 sigma^{-1} v with R = 1: 2 * 0.5 + (-1) * 1 = 0 and 2 * 0.5 + 1 = 2
        t.p2[0] = Tensor::column(&[2.0, 2.0]);
        t.delta[0] = Tensor::column(&[0.5, 0.5]);
        t.q2[0] = Tensor::column(&[-1.0, 1.0]);
        t.sigma_inv_v[0] = Tensor::column(&[1.0, 1.0]);
        assert!((loss_v(&t, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn full_space_never_trains_v() {
        let problem = bs_problem(ConstraintSet::Full { m: 2 }, UtilitySpec::Log);
        let before = SmpSolver::new(&problem, config(3, 5)).unwrap();
        let (after, trace) = SmpSolver::train(&problem, config(3, 5)).unwrap();
        assert_eq!(trace.len(), 5);
        assert!(trace.rows.iter().all(|r| r.loss_v == 0.0));
        for (a, b) in before.v_nets.iter().zip(&after.v_nets) {
            assert_eq!(a.params(), b.params());
        }
        assert_ne!(before.q_nets[0].params(), after.q_nets[0].params());
    }

    #[test]
    fn zero_iterations_and_seeds() {
        let problem = bs_problem(ConstraintSet::Ball { m: 2, radius: 0.5 }, UtilitySpec::Log);
        let (s, trace) = SmpSolver::train(&problem, config(3, 1)).unwrap();
        let mut fresh = SmpSolver::new(&problem, config(3, 1)).unwrap();
        let mut empty = SmpTrace::default();
        fresh.train_iterations(&problem, 0, &mut empty).unwrap();
        assert!(empty.is_empty());
        assert_eq!(fresh.y, 1.0);
        let (s2, trace2) = SmpSolver::train(&problem, config(3, 1)).unwrap();
        assert_eq!(s.y.to_bits(), s2.y.to_bits());
        assert_eq!(trace.rows[0].loss_q.to_bits(), trace2.rows[0].loss_q.to_bits());
        assert_eq!(s.v_nets, s2.v_nets);
        assert!(trace.rows[0].loss_v > 0.0);
    }

    #[test]
    fn bond_only_bracket() {
        // sigma huge and drift equal to r: theta = 0, so zero nets are optimal
        let c = MarketCoefficients::constant(0.05, &[0.05], &[vec![0.2]]).unwrap();
        let problem = SmpProblem::new(
            RandomMarket::Deterministic { coefficients: c },
            UtilitySpec::Power { p: 0.5 },
            ConstraintSet::Full { m: 1 },
            1.0,
        );
        let cfg = SmpConfig {
            horizon: 1.0,
            steps: 50,
            ..config(50, 1)
        };
        let mut s = SmpSolver::new(&problem, cfg).unwrap();
        zero_nets(&mut s);
        // minimiser of 1/(y c) + y for deterministic Y_N = y c, c = (1 - r dt)^N
        let ratio = (1.0 - 0.05 * 0.02f64).powi(50);
        s.y = ratio.powf(-0.5);
        let b = s.monte_carlo_bounds(&problem, 1000, 77).unwrap();
        let truth = 2.0 * (0.025f64).exp();
        assert!((b.u_low - truth).abs() / truth < 1e-4, "{b:?}");
        assert!((b.u_high - truth).abs() / truth < 1e-4, "{b:?}");
        assert!(b.ordered(0.0));
        assert_eq!((b.excluded_low, b.excluded_high, b.paths), (0, 0, 1000));
    }

    #[test]
    fn heston_training_runs() {
        let problem = SmpProblem::new(
            RandomMarket::Heston {
                params: HestonParams::default(),
                stocks: 1,
            },
            UtilitySpec::Power { p: 0.5 },
            ConstraintSet::Full { m: 1 },
            1.0,
        );
        let (s, trace) = SmpSolver::train(
            &problem,
            SmpConfig {
                horizon: 0.2,
                ..config(5, 200)
            },
        )
        .unwrap();
        assert!(trace.last().unwrap().loss_q < trace.rows[0].loss_q);
        let b = s.monte_carlo_bounds(&problem, 4096, 5).unwrap();
        assert!(b.ordered(3.0), "{b:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let problem = bs_problem(ConstraintSet::Cone { m: 2 }, UtilitySpec::Log);
        let (s, _) = SmpSolver::train(&problem, config(3, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = s.write_checkpoint(dir.path(), &problem).unwrap();
        let back = SmpCheckpoint::read(dir.path()).unwrap();
        assert_eq!(back, ck);
        let bin = SmpCheckpoint::read_binary(File::open(dir.path().join("smp.bin")).unwrap(), &back).unwrap();
        assert_eq!(bin, ck);
        let r = back.restore(&problem).unwrap();
        assert_eq!(r.y, s.y);
        assert_eq!(r.iterations_done(), 2);
        assert_eq!(r.q_nets, s.q_nets);
    }
}
