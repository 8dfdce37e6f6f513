//! Experiment configuration, orchestration and result emission.
//!
//! A JSON [`ExperimentConfig`] names a market, utility, constraint and solver.
//! [`run_experiment`] trains, evaluates and compares against the registered
//! oracle, [`convergence_study`] and [`methodology_sweep`] run families of
//! configs, and [`emit_results`] writes `results.json` and `table.csv`.

mod presets;
mod run;
mod study;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::BenchmarkError;
use crate::bsde2::{Bsde2Config, Bsde2Error, Enforcement};
use crate::constraint::{ConstraintSet, ProjectionRule};
use crate::nn::{Activation, LearningSchedule, OptimizerKind};
use crate::sde::{HestonParams, MarketCoefficients, PathDepVolParams, SdeError};
use crate::smp::{RandomMarket, SmpConfig, SmpError};
use crate::utility::UtilitySpec;

pub use presets::{preset, PRESETS};
pub use run::{oracle_value, run_experiment, Check, OracleValue, ResultRecord, ValueEntry};
pub use study::{
    convergence_study, emit_results, expand_sweep, loglog_slope, methodology_sweep, read_results, run_sweep,
    ConvergenceAxis, ConvergencePoint, ConvergenceStudy, EmitReport, MethodologyRow, MethodologyTable,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Bsde2(#[from] Bsde2Error),
    #[error(transparent)]
    Smp(#[from] SmpError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn twenty() -> usize {
    20
}
fn fifty() -> usize {
    50
}
fn default_rate() -> f64 {
    0.05
}
fn default_mu() -> f64 {
    0.06
}
fn default_sigma() -> f64 {
    0.2
}

/// Market of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MarketSpec {
    /// `m` stocks with drift `mu`, volatility `sigma I` and rate `rate`.
    BlackScholes {
        #[serde(default = "one")]
        m: usize,
        #[serde(default = "default_rate")]
        rate: f64,
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Constant coefficients with a seeded positive volatility matrix.
    Example1 {
        #[serde(default = "five")]
        m: usize,
    },
    /// Sinusoidal drift, `0.2 + 0.2 I` volatility.
    Example2 {
        #[serde(default = "fifty")]
        m: usize,
    },
    /// Sinusoidal diagonal volatility.
    Example3 {
        #[serde(default = "twenty")]
        m: usize,
    },
    Custom { coefficients: MarketCoefficients },
    Heston {
        #[serde(default)]
        params: HestonParams,
        #[serde(default = "one")]
        stocks: usize,
    },
    PathDependent {
        #[serde(default)]
        params: PathDepVolParams,
    },
}

impl MarketSpec {
    /// Number of traded assets.
    pub fn dim(&self) -> usize {
        match self {
            MarketSpec::BlackScholes { m, .. }
            | MarketSpec::Example1 { m }
            | MarketSpec::Example2 { m }
            | MarketSpec::Example3 { m } => *m,
            MarketSpec::Custom { coefficients } => coefficients.dim(),
            MarketSpec::Heston { stocks, .. } => *stocks,
            MarketSpec::PathDependent { params } => params.m,
        }
    }

    /// Same market with `m` traded assets.
    pub fn with_dim(&self, m: usize) -> Result<Self, HarnessError> {
        let mut out = self.clone();
        match &mut out {
            MarketSpec::BlackScholes { m: d, .. }
            | MarketSpec::Example1 { m: d }
            | MarketSpec::Example2 { m: d }
            | MarketSpec::Example3 { m: d } => *d = m,
            MarketSpec::Heston { stocks, .. } => *stocks = m,
            MarketSpec::PathDependent { params } => params.m = m,
            MarketSpec::Custom { .. } => {
                return Err(HarnessError::Config("a custom market has a fixed dimension".into()));
            }
        }
        Ok(out)
    }

    /// Whether the 2BSDE solvers apply.
    pub fn is_markovian(&self) -> bool {
        !matches!(self, MarketSpec::PathDependent { .. })
    }

    /// Deterministic coefficients, drawn from `seed` where random.
    pub fn coefficients(&self, seed: u64) -> Result<Option<MarketCoefficients>, HarnessError> {
        Ok(Some(match self {
            MarketSpec::BlackScholes { m, rate, mu, sigma } => {
                let matrix: Vec<Vec<f64>> = (0..*m)
                    .map(|i| (0..*m).map(|j| if i == j { *sigma } else { 0.0 }).collect())
                    .collect();
                MarketCoefficients::constant(*rate, &vec![*mu; *m], &matrix)?
            }
            MarketSpec::Example1 { m } => MarketCoefficients::example1(seed, *m),
            MarketSpec::Example2 { m } => MarketCoefficients::example2(seed, *m),
            MarketSpec::Example3 { m } => MarketCoefficients::example3(seed, *m),
            MarketSpec::Custom { coefficients } => coefficients.clone(),
            _ => return Ok(None),
        }))
    }

    /// Market as seen by the SMP solver.
    pub fn random_market(&self, seed: u64) -> Result<RandomMarket, HarnessError> {
        Ok(match self {
            MarketSpec::Heston { params, stocks } => RandomMarket::Heston {
                params: *params,
                stocks: *stocks,
            },
            MarketSpec::PathDependent { params } => RandomMarket::PathDependent { params: params.clone() },
            _ => RandomMarket::Deterministic {
                coefficients: self.coefficients(seed)?.expect("deterministic market"),
            },
        })
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.dim() == 0 {
            return Err(HarnessError::Config("market needs at least one stock".into()));
        }
        match self {
            MarketSpec::Heston { params, .. } => params.validate()?,
            MarketSpec::PathDependent { params } => params.validate()?,
            MarketSpec::Custom { coefficients } => coefficients.validate()?,
            _ => {
                self.coefficients(0)?;
            }
        }
        Ok(())
    }
}

/// Constraint set without its dimension, which comes from the market.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintSpec {
    #[default]
    Full,
    Cone,
    Ball { radius: f64 },
    /// The same interval `[lower, upper]` for every asset.
    Box { lower: f64, upper: f64 },
}

impl ConstraintSpec {
    pub fn to_set(&self, m: usize) -> ConstraintSet {
        match self {
            ConstraintSpec::Full => ConstraintSet::Full { m },
            ConstraintSpec::Cone => ConstraintSet::Cone { m },
            ConstraintSpec::Ball { radius } => ConstraintSet::Ball { m, radius: *radius },
            ConstraintSpec::Box { lower, upper } => ConstraintSet::Box {
                lower: vec![*lower; m],
                upper: vec![*upper; m],
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    #[serde(rename = "primal-2bsde")]
    PrimalBsde,
    #[serde(rename = "dual-2bsde")]
    DualBsde,
    #[serde(rename = "both-2bsde")]
    BothBsde,
    Smp,
    /// Primal and dual 2BSDE plus the SMP bracket.
    All,
}

impl SolverKind {
    pub fn runs_primal(self) -> bool {
        matches!(self, SolverKind::PrimalBsde | SolverKind::BothBsde | SolverKind::All)
    }
    pub fn runs_dual(self) -> bool {
        matches!(self, SolverKind::DualBsde | SolverKind::BothBsde | SolverKind::All)
    }
    pub fn runs_smp(self) -> bool {
        matches!(self, SolverKind::Smp | SolverKind::All)
    }
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::PrimalBsde => "primal-2bsde",
            SolverKind::DualBsde => "dual-2bsde",
            SolverKind::BothBsde => "both-2bsde",
            SolverKind::Smp => "smp",
            SolverKind::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Random market coefficients (volatility entries, phases).
    pub coefficient: u64,
    pub init: u64,
    pub path: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            coefficient: 1,
            init: 1,
            path: 2,
            eval: 3,
        }
    }
}

/// Learning rates; the run length is the config's `iterations`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSchedule {
    pub bsde_rate: f64,
    pub control_rate: f64,
    pub decay_factor: f64,
    pub decays: usize,
}

impl Default for RateSchedule {
    fn default() -> Self {
        let s = LearningSchedule::default();
        Self {
            bsde_rate: s.bsde_rate,
            control_rate: s.control_rate,
            decay_factor: s.decay_factor,
            decays: s.decays,
        }
    }
}

impl RateSchedule {
    pub fn schedule(&self, iterations: usize) -> LearningSchedule {
        LearningSchedule {
            bsde_rate: self.bsde_rate,
            control_rate: self.control_rate,
            decay_factor: self.decay_factor,
            decays: self.decays,
            total_iterations: iterations,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub steps: Vec<usize>,
    pub horizons: Vec<f64>,
    pub activations: Vec<Activation>,
    pub optimizers: Vec<OptimizerKind>,
    pub dimensions: Vec<usize>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
            && self.horizons.is_empty()
            && self.activations.is_empty()
            && self.optimizers.is_empty()
            && self.dimensions.is_empty()
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_x0() -> f64 {
    1.0
}
fn default_horizon() -> f64 {
    1.0
}
fn default_iterations() -> usize {
    1000
}
fn default_batch() -> usize {
    64
}
fn default_beta() -> f64 {
    0.5
}
fn default_init_std() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_eval_paths() -> usize {
    1 << 14
}
fn default_path_samples() -> usize {
    16
}
fn default_divergence() -> f64 {
    1e6
}
fn default_intervals() -> usize {
    2000
}

/// One experiment; every field except `market` and `utility` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub market: MarketSpec,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub constraint: ConstraintSpec,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub schedule: RateSchedule,
    /// Weight of the `Z` mismatch in the 2BSDE terminal loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub enforcement: Enforcement,
    /// Map into the dual cone (and into `K` for the SMP); filled by
    /// [`ExperimentConfig::resolve`].
    #[serde(default)]
    pub projection: Option<ProjectionRule>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_true")]
    pub antithetic: bool,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_eval_paths")]
    pub eval_paths: usize,
    /// Paths written to the path CSV.
    #[serde(default = "default_path_samples")]
    pub path_samples: usize,
    /// Oracle quadrature cells.
    #[serde(default = "default_intervals")]
    pub quadrature_intervals: usize,
    /// Relative-error bound asserted against the oracle.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Loss level treated as divergence.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub sweep: SweepAxes,
    /// Sweep points run concurrently.
    #[serde(default = "one")]
    pub parallelism: usize,
}

fn default_steps() -> usize {
    20
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl ExperimentConfig {
    /// Defaults for everything but the market and the utility.
    pub fn new(name: &str, market: MarketSpec, utility: UtilitySpec) -> Self {
        let mut c: Self = serde_json::from_value(serde_json::json!({
            "market": market,
            "utility": utility,
        }))
        .expect("market and utility serialise");
        c.name = name.into();
        c.resolve();
        c
    }

    /// Fills the defaults that depend on other fields.
    pub fn resolve(&mut self) {
        if self.projection.is_none() {
            self.projection = Some(if self.solver == SolverKind::Smp {
                ProjectionRule::Square
            } else {
                ProjectionRule::Max
            });
        }
    }

    pub fn constraint_set(&self) -> ConstraintSet {
        self.constraint.to_set(self.market.dim())
    }

    pub fn projection_rule(&self) -> ProjectionRule {
        self.projection.unwrap_or_default()
    }

    pub fn learning_schedule(&self) -> LearningSchedule {
        self.schedule.schedule(self.iterations)
    }

    pub fn bsde_config(&self) -> Bsde2Config {
        Bsde2Config {
            horizon: self.horizon,
            steps: self.steps,
            batch: self.batch,
            schedule: self.learning_schedule(),
            beta: self.beta,
            antithetic: self.antithetic,
            optimizer: self.optimizer,
            activation: self.activation,
            init_std: self.init_std,
            warm_start: self.warm_start,
            init_seed: self.seeds.init,
            path_seed: self.seeds.path,
            divergence_threshold: self.divergence_threshold,
            ..Default::default()
        }
    }

    pub fn smp_config(&self) -> SmpConfig {
        SmpConfig {
            horizon: self.horizon,
            steps: self.steps,
            batch: self.batch,
            schedule: self.learning_schedule(),
            antithetic: self.antithetic,
            optimizer: self.optimizer,
            activation: self.activation,
            init_std: self.init_std,
            init_seed: self.seeds.init,
            path_seed: self.seeds.path,
            divergence_threshold: self.divergence_threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name {:?} must be a non-empty file stem", self.name));
        }
        if self.steps == 0 {
            return bad("N must be at least 1".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("T must be positive, got {}", self.horizon));
        }
        if !(self.divergence_threshold > 0.0) {
            return bad(format!("divergence threshold must be positive, got {}", self.divergence_threshold));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return bad(format!("x0 must be positive, got {}", self.x0));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.eval_paths < 2 || (self.antithetic && self.eval_paths % 2 == 1) {
            return bad(format!("eval_paths {} must be at least 2 (even with antithetic pairs)", self.eval_paths));
        }
        if self.quadrature_intervals < 2 {
            return bad("quadrature_intervals must be at least 2".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                return bad(format!("tolerance must be positive, got {t}"));
            }
        }
        self.utility.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.market.validate()?;
        self.constraint_set().validate().map_err(HarnessError::Config)?;
        let kind = self.solver;
        if !self.market.is_markovian() && (kind.runs_primal() || kind.runs_dual()) {
            return bad(format!(
                "solver {} needs a Markovian market; the path-dependent market only supports smp",
                kind.name()
            ));
        }
        if matches!(self.market, MarketSpec::Heston { .. })
            && kind.runs_dual()
            && self.constraint != ConstraintSpec::Full
        {
            return bad("the Heston dual 2BSDE only supports the full constraint".into());
        }
        if kind == SolverKind::Smp {
            if self.warm_start {
                return bad("warm_start is a 2BSDE option and does not apply to smp".into());
            }
            if matches!(self.enforcement, Enforcement::Soft { .. }) {
                return bad("soft enforcement is a 2BSDE option and does not apply to smp".into());
            }
        }
        for &n in &self.sweep.steps {
            if n == 0 {
                return bad("sweep steps must be at least 1".into());
            }
        }
        for &t in &self.sweep.horizons {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("sweep horizon {t} must be positive"));
            }
        }
        for &m in &self.sweep.dimensions {
            self.market.with_dim(m)?.validate()?;
        }
        self.bsde_config().validate()?;
        self.smp_config().validate()?;
        Ok(())
    }

    /// Copy with seed overrides applied.
    pub fn with_seeds(
        mut self,
        coefficient: Option<u64>,
        init: Option<u64>,
        path: Option<u64>,
        eval: Option<u64>,
    ) -> Self {
        if let Some(s) = coefficient {
            self.seeds.coefficient = s;
        }
        if let Some(s) = init {
            self.seeds.init = s;
        }
        if let Some(s) = path {
            self.seeds.path = s;
        }
        if let Some(s) = eval {
            self.seeds.eval = s;
        }
        self
    }
}

/// Parses, resolves and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut c: ExperimentConfig = serde_json::from_str(text)?;
    c.resolve();
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    parse_config(&std::fs::read_to_string(path)?)
}
