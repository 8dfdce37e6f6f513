use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError, MarketSpec};
use crate::autodiff::Tensor;
use crate::benchmarks::{
    heston_riccati_value, log_ball_solution, log_unconstrained_solution, merton_cone_solution,
    merton_unconstrained_solution, nonhara_value,
};
use crate::bsde2::{
    forward_sweep, write_checkpoint, Bsde2Error, ControlProblem, HestonDual, HestonPrimal, Solver2Bsde,
    TrainingTrace, UtilityDual, UtilityPrimal,
};
use crate::constraint::ConstraintSet;
use crate::sde::{splitmix64, write_paths_csv, Increments};
use crate::smp::{SmpError, SmpProblem, SmpSolver, SmpTrace, ValueBracket};
use crate::utility::UtilitySpec;

/// Reference value of a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub source: String,
}

/// One value estimate: `primal`, `dual`, `smp-low` or `smp-high`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub label: String,
    /// Learned `V(0)` for the 2BSDE solvers, a bound for the SMP.
    pub value: f64,
    /// Monte-Carlo standard error.
    pub se: f64,
    /// Monte-Carlo mean under the learned control (2BSDE only).
    pub mc_mean: Option<f64>,
    /// `(value - oracle) / oracle`; present iff the record has an oracle.
    pub rel_err: Option<f64>,
    pub seconds: f64,
}

/// An asserted tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Effective config, defaults included.
    pub config: ExperimentConfig,
    pub oracle: Option<OracleValue>,
    pub values: Vec<ValueEntry>,
    pub bracket: Option<ValueBracket>,
    pub final_losses: BTreeMap<String, f64>,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl ResultRecord {
    pub fn value(&self, label: &str) -> Option<&ValueEntry> {
        self.values.iter().find(|v| v.label == label)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Zeroes every wall-clock field.
    pub fn without_timings(mut self) -> Self {
        self.seconds = 0.0;
        for v in &mut self.values {
            v.seconds = 0.0;
        }
        self
    }
}

fn rel(value: f64, oracle: &Option<OracleValue>) -> Option<f64> {
    oracle.as_ref().map(|o| (value - o.value) / o.value)
}

/// Oracle registered for the configuration's (market, utility, constraint).
pub fn oracle_value(config: &ExperimentConfig) -> Result<Option<OracleValue>, HarnessError> {
    let (x0, horizon, cells) = (config.x0, config.horizon, config.quadrature_intervals);
    let out = |value: f64, source: &str| {
        Some(OracleValue {
            value,
            source: source.into(),
        })
    };
    if let MarketSpec::Heston { params, stocks } = &config.market {
        return Ok(match (config.utility, config.constraint_set(), stocks) {
            (UtilitySpec::Power { p }, ConstraintSet::Full { .. }, 1) => {
                out(heston_riccati_value(params, p, x0, params.v0, horizon)?, "heston-riccati-rk4")
            }
            _ => None,
        });
    }
    let Some(market) = config.market.coefficients(config.seeds.coefficient)? else {
        return Ok(None);
    };
    let sol = match (config.utility, config.constraint_set()) {
        (UtilitySpec::NonHara, ConstraintSet::Full { .. }) if market.is_time_homogeneous() => {
            nonhara_value(market.r(0.0), &market.theta(0.0), x0, horizon)?.solution()
        }
        (UtilitySpec::Power { p }, ConstraintSet::Full { .. }) => {
            merton_unconstrained_solution(&market, p, x0, horizon, cells)?.solution()
        }
        (UtilitySpec::Power { p }, ConstraintSet::Cone { .. }) => {
            merton_cone_solution(&market, p, x0, horizon, cells)?.solution()
        }
        (UtilitySpec::Log, ConstraintSet::Ball { radius, .. }) => log_ball_solution(&market, radius, x0, horizon, cells)?,
        (UtilitySpec::Log, ConstraintSet::Full { .. }) => log_unconstrained_solution(&market, x0, horizon, cells)?,
        _ => return Ok(None),
    };
    Ok(out(sol.value, &sol.source))
}

struct SolverOutput {
    entry: ValueEntry,
    losses: Vec<(String, f64)>,
}

fn write_trace_file(out: Option<&Path>, file: &str, write: impl FnOnce(File) -> std::io::Result<()>) -> Result<(), HarnessError> {
    if let Some(dir) = out {
        let dir = dir.join("traces");
        std::fs::create_dir_all(&dir)?;
        write(File::create(dir.join(file))?)?;
    }
    Ok(())
}

fn eval_increments(config: &ExperimentConfig, noise_dim: usize) -> Increments {
    let paths = config.path_samples.max(2) & !1;
    Increments::sample(splitmix64(config.seeds.eval ^ 0x5041_5448), paths, config.steps, noise_dim, config.antithetic)
}

fn run_bsde<P: ControlProblem>(
    problem: &P,
    label: &str,
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<SolverOutput, HarnessError> {
    let clock = Instant::now();
    let stem = format!("{}-{label}", config.name);
    let (solver, trace) = match Solver2Bsde::train(problem, config.bsde_config()) {
        Ok(r) => r,
        Err(Bsde2Error::Divergence { iteration, loss, trace }) => {
            write_trace_file(out, &format!("{stem}.csv"), |f| trace.write_csv(BufWriter::new(f)))?;
            return Err(Bsde2Error::Divergence { iteration, loss, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mc = solver.evaluate(problem, config.eval_paths, config.seeds.eval)?;
    let seconds = clock.elapsed().as_secs_f64();
    write_trace_file(out, &format!("{stem}.csv"), |f| trace.write_csv(BufWriter::new(f)))?;
    if let Some(dir) = out {
        write_checkpoint(&dir.join("checkpoints").join(&stem), problem, &solver)?;
        let inc = eval_increments(config, problem.noise_dim());
        let traj = forward_sweep(problem, &solver, &inc)?;
        std::fs::create_dir_all(dir.join("paths"))?;
        let f = BufWriter::new(File::create(dir.join("paths").join(format!("{stem}.csv")))?);
        write_paths_csv(&config.bsde_config().grid(), &traj.x, f)?;
    }
    Ok(SolverOutput {
        entry: ValueEntry {
            label: label.into(),
            value: solver.value_at_zero(problem),
            se: mc.se,
            mc_mean: Some(mc.mean),
            rel_err: None,
            seconds,
        },
        losses: bsde_losses(label, &trace),
    })
}

fn bsde_losses(label: &str, trace: &TrainingTrace) -> Vec<(String, f64)> {
    let Some(last) = trace.last() else {
        return Vec::new();
    };
    // mean over the last 5% of iterations
    let tail = &trace.rows[trace.len() - (trace.len() / 20).max(1)..];
    let mut v = vec![
        (format!("{label}-l1"), last.l1),
        (format!("{label}-l1-tail-mean"), tail.iter().map(|r| r.l1).sum::<f64>() / tail.len() as f64),
        (format!("{label}-control-grad"), last.control_grad_norm),
    ];
    if let Some(l3) = last.l3 {
        v.push((format!("{label}-l3"), l3));
    }
    v
}

fn run_smp(config: &ExperimentConfig, out: Option<&Path>) -> Result<(Vec<SolverOutput>, ValueBracket), HarnessError> {
    let mut problem = SmpProblem::new(
        config.market.random_market(config.seeds.coefficient)?,
        config.utility,
        config.constraint_set(),
        config.x0,
    );
    problem.rule = config.projection_rule();
    let clock = Instant::now();
    let stem = format!("{}-smp", config.name);
    let (solver, trace) = match SmpSolver::train(&problem, config.smp_config()) {
        Ok(r) => r,
        Err(SmpError::Divergence { iteration, loss, trace }) => {
            write_trace_file(out, &format!("{stem}.csv"), |f| trace.write_csv(BufWriter::new(f)))?;
            return Err(SmpError::Divergence { iteration, loss, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let bracket = solver.monte_carlo_bounds(&problem, config.eval_paths, config.seeds.eval)?;
    let seconds = clock.elapsed().as_secs_f64();
    write_trace_file(out, &format!("{stem}.csv"), |f| trace.write_csv(BufWriter::new(f)))?;
    if let Some(dir) = out {
        solver.write_checkpoint(&dir.join("checkpoints").join(&stem), &problem)?;
        write_smp_paths(dir, &stem, config, &problem, &solver)?;
        std::fs::create_dir_all(dir.join("brackets"))?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("brackets").join(format!("{}.json", config.name)))?),
            &bracket,
        )?;
    }
    let losses = smp_losses(&trace);
    let entry = |label: &str, value: f64, se: f64| SolverOutput {
        entry: ValueEntry {
            label: label.into(),
            value,
            se,
            mc_mean: None,
            rel_err: None,
            seconds,
        },
        losses: Vec::new(),
    };
    let mut low = entry("smp-low", bracket.u_low, bracket.se_low);
    low.losses = losses;
    Ok((vec![low, entry("smp-high", bracket.u_high, bracket.se_high)], bracket))
}

fn smp_losses(trace: &SmpTrace) -> Vec<(String, f64)> {
    trace.last().map_or_else(Vec::new, |r| {
        vec![
            ("smp-loss-y".into(), r.loss_y),
            ("smp-loss-q".into(), r.loss_q),
            ("smp-loss-v".into(), r.loss_v),
        ]
    })
}

/// `path,t,y,p2` rows along the evaluation sample.
fn write_smp_paths(
    dir: &Path,
    stem: &str,
    config: &ExperimentConfig,
    problem: &SmpProblem,
    solver: &SmpSolver,
) -> Result<(), HarnessError> {
    let inc = eval_increments(config, problem.market.noise_dim());
    let paths = solver.sample_paths(problem, &inc)?;
    let traj = solver.trajectories(problem, &paths)?;
    let states: Vec<Tensor> = traj.y.iter().zip(&traj.p2).map(|(y, p)| Tensor::hcat(&[y, p])).collect();
    std::fs::create_dir_all(dir.join("paths"))?;
    let f = BufWriter::new(File::create(dir.join("paths").join(format!("{stem}.csv")))?);
    write_paths_csv(&config.smp_config().grid(), &states, f)?;
    Ok(())
}

/// Trains every solver of `config`, evaluates, compares with the oracle and,
/// when `out` is given, writes traces, checkpoints, path CSVs and brackets.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ResultRecord, HarnessError> {
    config.validate()?;
    let clock = Instant::now();
    let oracle = oracle_value(config)?;
    let mut outputs = Vec::new();
    let mut bracket = None;
    let seed = config.seeds.coefficient;
    if config.solver.runs_primal() {
        let o = match &config.market {
            MarketSpec::Heston { params, stocks } => {
                let problem = HestonPrimal {
                    params: *params,
                    utility: config.utility,
                    stocks: *stocks,
                    constraint: config.constraint_set(),
                    enforcement: config.enforcement,
                    x0: config.x0,
                };
                run_bsde(&problem, "primal", config, out)?
            }
            market => {
                let problem = UtilityPrimal {
                    market: market.coefficients(seed)?.expect("Markovian market"),
                    utility: config.utility,
                    constraint: config.constraint_set(),
                    enforcement: config.enforcement,
                    x0: config.x0,
                };
                run_bsde(&problem, "primal", config, out)?
            }
        };
        outputs.push(o);
    }
    if config.solver.runs_dual() {
        let o = match &config.market {
            MarketSpec::Heston { params, stocks } => {
                let problem = HestonDual {
                    params: *params,
                    utility: config.utility,
                    stocks: *stocks,
                    x0: config.x0,
                };
                run_bsde(&problem, "dual", config, out)?
            }
            market => {
                let problem = UtilityDual {
                    market: market.coefficients(seed)?.expect("Markovian market"),
                    utility: config.utility,
                    constraint: config.constraint_set(),
                    rule: config.projection_rule(),
                    x0: config.x0,
                };
                run_bsde(&problem, "dual", config, out)?
            }
        };
        outputs.push(o);
    }
    if config.solver.runs_smp() {
        let (o, b) = run_smp(config, out)?;
        outputs.extend(o);
        bracket = Some(b);
    }
    let mut values = Vec::new();
    let mut final_losses = BTreeMap::new();
    for mut o in outputs {
        o.entry.rel_err = rel(o.entry.value, &oracle);
        values.push(o.entry);
        final_losses.extend(o.losses);
    }
    let mut record = ResultRecord {
        config: config.clone(),
        oracle,
        values,
        bracket,
        final_losses,
        seconds: clock.elapsed().as_secs_f64(),
        checks: Vec::new(),
    };
    record.checks = checks(&record);
    Ok(record)
}

fn checks(r: &ResultRecord) -> Vec<Check> {
    let Some(tol) = r.config.tolerance else {
        return Vec::new();
    };
    let name = &r.config.name;
    let mut out = Vec::new();
    for v in &r.values {
        if let Some(e) = v.rel_err {
            out.push(Check {
                name: format!("{name}: {} relative error", v.label),
                passed: e.abs() < tol,
                detail: format!("|{:.4e}| < {tol:.1e}", e),
            });
        }
    }
    if let (Some(p), Some(d)) = (r.value("primal"), r.value("dual")) {
        let slack = 3.0 * (p.se + d.se);
        out.push(Check {
            name: format!("{name}: primal <= dual"),
            passed: p.value <= d.value + slack,
            detail: format!("{:.6} <= {:.6} + {slack:.1e}", p.value, d.value),
        });
    }
    if let Some(b) = &r.bracket {
        out.push(Check {
            name: format!("{name}: u_low <= u_high"),
            passed: b.ordered(3.0),
            detail: format!("{:.6} <= {:.6} + 3 se", b.u_low, b.u_high),
        });
    }
    out
}
