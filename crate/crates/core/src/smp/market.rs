use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::sde::{
    simulate_stocks, simulate_variance, HestonParams, Increments, MarketCoefficients, PathDepVolParams, SdeError,
    TimeGrid,
};

/// Smallest volatility entry used when inverting a sampled diagonal `sigma`.
const VOL_FLOOR: f64 = 1e-8;

/// Market whose coefficients may be random processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RandomMarket {
    /// Deterministic (possibly time-dependent) coefficients.
    Deterministic { coefficients: MarketCoefficients },
    /// `stocks` independent Heston stocks treated as random coefficients:
    /// `sigma = diag(sqrt(v))`, `theta = A sqrt(v)`; only the stock noises are
    /// traded.
    Heston { params: HestonParams, stocks: usize },
    /// Volatility switching on each stock's running maximum.
    PathDependent { params: PathDepVolParams },
}

/// Volatility at one grid time, either shared by every path or a per-path
/// diagonal.
#[derive(Clone, Debug, PartialEq)]
pub enum StepVol {
    /// `sigma` and `sigma^{-T}`, both `m x m` row-major.
    Shared { sigma: Tensor, inv_t: Tensor },
    /// `k x m` diagonals.
    Diagonal { diag: Tensor },
}

impl StepVol {
    /// Rows `(sigma^T h)^T` of a `k x m` node.
    pub fn sigma_t_rows(&self, tape: &mut Tape, h: NodeId) -> NodeId {
        match self {
            StepVol::Shared { sigma, .. } => {
                let s = tape.constant(sigma.clone());
                tape.matmul(h, s)
            }
            StepVol::Diagonal { diag } => {
                let d = tape.constant(diag.clone());
                tape.mul(h, d)
            }
        }
    }

    /// Rows `(sigma^{-1} v)^T` of a `k x m` node.
    pub fn sigma_inv_rows(&self, tape: &mut Tape, v: NodeId) -> NodeId {
        match self {
            StepVol::Shared { inv_t, .. } => {
                let s = tape.constant(inv_t.clone());
                tape.matmul(v, s)
            }
            StepVol::Diagonal { diag } => {
                let d = tape.constant(diag.map(|s| 1.0 / s.max(VOL_FLOOR)));
                tape.mul(v, d)
            }
        }
    }

    /// Value version of [`StepVol::sigma_inv_rows`].
    pub fn sigma_inv_value(&self, v: &Tensor) -> Tensor {
        match self {
            StepVol::Shared { inv_t, .. } => v.matmul(inv_t),
            StepVol::Diagonal { diag } => v.zip_map(diag, |a, s| a / s.max(VOL_FLOOR)),
        }
    }

    /// Rows `((sigma^T)^{-1} q)^T`.
    pub fn solve_sigma_t(&self, q: &Tensor) -> Tensor {
        match self {
            // q^T sigma^{-1} = q^T (sigma^{-T})^T
            StepVol::Shared { inv_t, .. } => q.matmul_t(inv_t),
            StepVol::Diagonal { diag } => q.zip_map(diag, |a, s| a / s.max(VOL_FLOOR)),
        }
    }
}

/// Coefficients sampled along a batch of paths.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketPaths {
    /// `r(t_i)` for `i = 0..N-1`.
    pub rates: Vec<f64>,
    /// `N` tensors `k x m`.
    pub theta: Vec<Tensor>,
    pub vol: Vec<StepVol>,
    /// `N` tensors `k x f` of extra network inputs (`f` may be 0).
    pub features: Vec<Tensor>,
    /// Increments of the traded Brownian motions (`m` columns).
    pub traded: Increments,
}

fn row_major(m: &nalgebra::DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_vec(r, c, (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect())
}

impl RandomMarket {
    pub fn validate(&self) -> Result<(), SdeError> {
        match self {
            RandomMarket::Deterministic { coefficients } => coefficients.validate(),
            RandomMarket::Heston { params, stocks } => {
                if *stocks == 0 {
                    return Err(SdeError::InvalidParams("need at least one stock".into()));
                }
                params.validate()
            }
            RandomMarket::PathDependent { params } => params.validate(),
        }
    }

    /// Number of traded assets `m`.
    pub fn traded_dim(&self) -> usize {
        match self {
            RandomMarket::Deterministic { coefficients } => coefficients.dim(),
            RandomMarket::Heston { stocks, .. } => *stocks,
            RandomMarket::PathDependent { params } => params.m,
        }
    }

    /// Columns of the Brownian increments driving the market.
    pub fn noise_dim(&self) -> usize {
        match self {
            RandomMarket::Heston { stocks, .. } => 2 * stocks,
            _ => self.traded_dim(),
        }
    }

    /// Extra network inputs next to the dual state.
    pub fn feature_dim(&self) -> usize {
        match self {
            RandomMarket::Deterministic { .. } => 0,
            RandomMarket::Heston { stocks, .. } => *stocks,
            RandomMarket::PathDependent { params } => 2 * params.m,
        }
    }

    pub fn rate(&self) -> f64 {
        match self {
            RandomMarket::Deterministic { coefficients } => coefficients.r(0.0),
            RandomMarket::Heston { params, .. } => params.rate,
            RandomMarket::PathDependent { params } => params.rate,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RandomMarket::Deterministic { .. } => "deterministic",
            RandomMarket::Heston { .. } => "heston",
            RandomMarket::PathDependent { .. } => "path-dependent",
        }
    }

    /// Samples the coefficients along `inc` (`noise_dim` columns).
    pub fn sample(&self, grid: &TimeGrid, inc: &Increments) -> Result<MarketPaths, SdeError> {
        let k = inc.paths();
        let m = self.traded_dim();
        let n = grid.steps();
        if inc.dim() != self.noise_dim() || inc.num_steps() != n {
            return Err(SdeError::Shape(format!(
                "market needs {} noise columns over {n} steps, got {} over {}",
                self.noise_dim(),
                inc.dim(),
                inc.num_steps()
            )));
        }
        let mut out = MarketPaths {
            rates: Vec::with_capacity(n),
            theta: Vec::with_capacity(n),
            vol: Vec::with_capacity(n),
            features: Vec::with_capacity(n),
            traded: inc.columns(0, m),
        };
        match self {
            RandomMarket::Deterministic { coefficients } => {
                for i in 0..n {
                    let t = grid.t(i);
                    out.rates.push(coefficients.r(t));
                    out.theta.push(Tensor::row_vector(&coefficients.theta(t)).repeat_rows(k));
                    out.vol.push(StepVol::Shared {
                        sigma: row_major(&coefficients.sigma(t)),
                        inv_t: row_major(&coefficients.sigma_inv(t).transpose()),
                    });
                    out.features.push(Tensor::zeros(k, 0));
                }
            }
            RandomMarket::Heston { params, .. } => {
                let var = simulate_variance(params, grid, inc)?;
                for v in var.iter().take(n) {
                    let sd = v.map(|x| x.max(0.0).sqrt());
                    out.rates.push(params.rate);
                    out.theta.push(sd.scale(params.a));
                    out.vol.push(StepVol::Diagonal { diag: sd });
                    out.features.push(v.clone());
                }
            }
            RandomMarket::PathDependent { params } => {
                let paths = simulate_stocks(params, grid, inc)?;
                let excess = params.mu - params.rate;
                for i in 0..n {
                    out.rates.push(params.rate);
                    out.theta.push(paths.sigma[i].map(|s| excess / s));
                    out.vol.push(StepVol::Diagonal {
                        diag: paths.sigma[i].clone(),
                    });
                    out.features.push(Tensor::hcat(&[&paths.prices[i], &paths.running_max[i]]));
                }
            }
        }
        Ok(out)
    }
}
