//! Deep stochastic-maximum-principle solver for the dual utility problem in
//! markets with random coefficients.
//!
//! The dual state `Y` and the dual adjoint `P_2` are simulated forward from
//! `Y(0) = y`, `P_2(0) = x0`. Networks give the dual control `v` and the
//! adjoint loading `Q_2 = P_2 sigma^T h_K(net)`, so `P_2` is a wealth process
//! trading the fraction `h_K(net)` in `K`. Three losses drive `y`, the `Q_2`
//! networks and the `v` networks in turn, and Monte Carlo gives lower and
//! upper bounds on the value.

mod market;
mod solver;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::constraint::{ConstraintSet, ProjectionRule};
use crate::nn::NnError;
use crate::sde::SdeError;
use crate::utility::UtilitySpec;

pub use market::{MarketPaths, RandomMarket, StepVol};
pub use solver::{loss_q, loss_v, loss_y, SmpCheckpoint, SmpConfig, SmpSolver, SmpTrajectories};

#[derive(Debug, Error)]
pub enum SmpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {process} at step {step}")]
    NonFinite { process: &'static str, step: usize },
    #[error("dual control left the domain of the support function at step {step}")]
    InfiniteSupport { step: usize },
    #[error("diverged at iteration {iteration}: L^Q = {loss}")]
    Divergence {
        iteration: usize,
        loss: f64,
        trace: SmpTrace,
    },
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

fn square_rule() -> ProjectionRule {
    ProjectionRule::Square
}

/// Dual utility problem for the SMP solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpProblem {
    pub market: RandomMarket,
    pub utility: UtilitySpec,
    pub constraint: ConstraintSet,
    /// Map from raw outputs into `K` (for `h_K`) and into the dual cone.
    #[serde(default = "square_rule")]
    pub rule: ProjectionRule,
    pub x0: f64,
}

impl SmpProblem {
    pub fn new(market: RandomMarket, utility: UtilitySpec, constraint: ConstraintSet, x0: f64) -> Self {
        Self {
            market,
            utility,
            constraint,
            rule: ProjectionRule::Square,
            x0,
        }
    }

    pub fn validate(&self) -> Result<(), SmpError> {
        self.market.validate()?;
        self.utility.validate().map_err(|e| SmpError::Config(e.to_string()))?;
        self.constraint.validate().map_err(SmpError::Config)?;
        if self.constraint.dim() != self.market.traded_dim() {
            return Err(SmpError::Config(format!(
                "constraint has dimension {}, market trades {} assets",
                self.constraint.dim(),
                self.market.traded_dim()
            )));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(SmpError::Config(format!("x0 must be positive, got {}", self.x0)));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("smp-{}-{}", self.market.name(), self.utility.name())
    }

    /// Width of the network input: `Y` plus the market features.
    pub fn input_dim(&self) -> usize {
        1 + self.market.feature_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpTraceRow {
    pub iteration: usize,
    pub loss_y: f64,
    pub loss_q: f64,
    /// `sum_i L^v(theta^v_i)` before the update; 0 when `v` is not trained.
    pub loss_v: f64,
    pub y: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmpTrace {
    pub rows: Vec<SmpTraceRow>,
}

impl SmpTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&SmpTraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,loss_y,loss_q,loss_v,y,seconds")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.iteration, r.loss_y, r.loss_q, r.loss_v, r.y, r.seconds)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self, SmpError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || SmpError::Config(format!("malformed trace line {}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(SmpTraceRow {
                iteration: f[0].parse().map_err(|_| bad())?,
                loss_y: num(f[1])?,
                loss_q: num(f[2])?,
                loss_v: num(f[3])?,
                y: num(f[4])?,
                seconds: num(f[5])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Monte-Carlo lower and upper bounds on the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueBracket {
    /// Mean of `U(P_2(N))` over paths with `P_2(N) > 0`.
    pub u_low: f64,
    /// Mean of `U~(Y(N))` over paths with `Y(N) > 0`, plus `x0 y`.
    pub u_high: f64,
    pub se_low: f64,
    pub se_high: f64,
    /// Paths simulated.
    pub paths: usize,
    /// Paths dropped from `u_low` because `P_2(N) <= 0`.
    pub excluded_low: usize,
    /// Paths dropped from `u_high` because `Y(N) <= 0`.
    pub excluded_high: usize,
    pub steps: usize,
    pub horizon: f64,
    pub y: f64,
    pub init_seed: u64,
    pub path_seed: u64,
    pub eval_seed: u64,
}

impl ValueBracket {
    pub fn width(&self) -> f64 {
        self.u_high - self.u_low
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.u_low + self.u_high)
    }

    /// Whether `value` lies in `[u_low - k se_low, u_high + k se_high]`.
    pub fn contains(&self, value: f64, k: f64) -> bool {
        value >= self.u_low - k * self.se_low && value <= self.u_high + k * self.se_high
    }

    /// `u_low <= u_high + k (se_low + se_high)`.
    pub fn ordered(&self, k: f64) -> bool {
        self.u_low <= self.u_high + k * (self.se_low + self.se_high)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::MarketCoefficients;

    #[test]
    fn problem_validation() {
        let market = RandomMarket::Deterministic {
            coefficients: MarketCoefficients::example1(1, 3),
        };
        let ok = SmpProblem::new(market.clone(), UtilitySpec::Log, ConstraintSet::Full { m: 3 }, 1.0);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.input_dim(), 1);
        let bad = SmpProblem::new(market.clone(), UtilitySpec::Log, ConstraintSet::Full { m: 2 }, 1.0);
        assert!(bad.validate().is_err());
        let bad = SmpProblem::new(market, UtilitySpec::Log, ConstraintSet::Full { m: 3 }, 0.0);
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(serde_json::from_str::<SmpProblem>(&json).unwrap(), ok);
    }

    #[test]
    fn trace_round_trip() {
        let t = SmpTrace {
            rows: vec![SmpTraceRow {
                iteration: 3,
                loss_y: 2.5,
                loss_q: 1e-6,
                loss_v: 0.0,
                y: 0.75,
                seconds: 0.5,
            }],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(SmpTrace::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn bracket_helpers() {
        let b = ValueBracket {
            u_low: 1.0,
            u_high: 1.2,
            se_low: 0.01,
            se_high: 0.01,
            paths: 10,
            excluded_low: 0,
            excluded_high: 0,
            steps: 5,
            horizon: 1.0,
            y: 1.0,
            init_seed: 1,
            path_seed: 2,
            eval_seed: 3,
        };
        assert!((b.width() - 0.2).abs() < 1e-15);
        assert!((b.midpoint() - 1.1).abs() < 1e-15);
        assert!(b.contains(0.98, 3.0) && !b.contains(0.9, 3.0));
        assert!(b.ordered(0.0));
    }
}
