use serde::{Deserialize, Serialize};

use super::{Increments, SdeError, TimeGrid};
use crate::autodiff::Tensor;

/// Two-regime volatility: a stock at its running maximum carries
/// `sigma_high`, otherwise `sigma_low`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathDepVolParams {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub m: usize,
    pub rate: f64,
    pub mu: f64,
    pub s0: f64,
}

impl Default for PathDepVolParams {
    fn default() -> Self {
        Self {
            sigma_low: 0.3,
            sigma_high: 0.2,
            m: 2,
            rate: 0.05,
            mu: 0.06,
            s0: 1.0,
        }
    }
}

impl PathDepVolParams {
    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.sigma_low > self.sigma_high && self.sigma_high > 0.0) {
            return Err(SdeError::InvalidParams(format!(
                "need sigma_low > sigma_high > 0, got {} and {}",
                self.sigma_low, self.sigma_high
            )));
        }
        if self.m == 0 || !(self.s0 > 0.0) {
            return Err(SdeError::InvalidParams("need m >= 1 and s0 > 0".into()));
        }
        Ok(())
    }
}

const AT_MAX_RTOL: f64 = 1e-12;

/// Diagonal of `sigma(t)` from the running maxima and current prices.
pub fn pathdep_sigma(params: &PathDepVolParams, running_max: &[f64], current: &[f64]) -> Vec<f64> {
    current
        .iter()
        .zip(running_max)
        .map(|(s, m)| {
            if *s >= m * (1.0 - AT_MAX_RTOL) {
                params.sigma_high
            } else {
                params.sigma_low
            }
        })
        .collect()
}

/// Simulated stock paths with their running maxima and volatilities.
#[derive(Clone, Debug, PartialEq)]
pub struct StockPaths {
    /// `N + 1` tensors `k x m`.
    pub prices: Vec<Tensor>,
    /// `N + 1` tensors `k x m`.
    pub running_max: Vec<Tensor>,
    /// `N + 1` tensors `k x m`: diagonal of `sigma(t_i)`.
    pub sigma: Vec<Tensor>,
}

/// Log-space Euler paths `log S += (mu - sigma^2/2) dt + sigma sqrt(dt) dW`
/// with `sigma` re-evaluated from the path prefix at every grid point.
pub fn simulate_stocks(
    params: &PathDepVolParams,
    grid: &TimeGrid,
    inc: &Increments,
) -> Result<StockPaths, SdeError> {
    params.validate()?;
    let m = params.m;
    if inc.dim() != m || inc.num_steps() != grid.steps() {
        return Err(SdeError::Shape(format!(
            "need {m} noise columns over {} steps, got {} over {}",
            grid.steps(),
            inc.dim(),
            inc.num_steps()
        )));
    }
    let k = inc.paths();
    let s0 = Tensor::filled(k, m, params.s0);
    let sig0 = Tensor::filled(k, m, params.sigma_high);
    let mut prices = vec![s0.clone()];
    let mut running_max = vec![s0];
    let mut sigma = vec![sig0];
    for i in 0..grid.steps() {
        let dt = grid.dt(i);
        let sq = dt.sqrt();
        let dw = inc.step(i);
        let mut s = prices[i].clone();
        let mut mx = running_max[i].clone();
        let mut sg = Tensor::zeros(k, m);
        for r in 0..k {
            for j in 0..m {
                let vol = sigma[i].get(r, j);
                let next = prices[i].get(r, j) * ((params.mu - 0.5 * vol * vol) * dt + vol * sq * dw.get(r, j)).exp();
                s.set(r, j, next);
                mx.set(r, j, mx.get(r, j).max(next));
            }
            let row = pathdep_sigma(params, mx.row(r), s.row(r));
            sg.row_mut(r).copy_from_slice(&row);
        }
        prices.push(s);
        running_max.push(mx);
        sigma.push(sg);
    }
    Ok(StockPaths {
        prices,
        running_max,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_rule_examples() {
        let p = PathDepVolParams::default();
        assert_eq!(pathdep_sigma(&p, &[1.0, 1.0], &[1.0, 1.0]), vec![0.2, 0.2]);
        assert_eq!(pathdep_sigma(&p, &[1.2], &[1.1]), vec![0.3]);
        assert_eq!(pathdep_sigma(&p, &[1.5, 2.0], &[1.5, 1.9]), vec![0.2, 0.3]);
        assert_eq!(pathdep_sigma(&p, &[1.0], &[1.0 - 1e-14]), vec![0.2]);
    }

    #[test]
    fn invalid_levels_rejected() {
        let p = PathDepVolParams {
            sigma_low: 0.1,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn sigma_is_a_function_of_the_prefix() {
        let p = PathDepVolParams::default();
        let grid = TimeGrid::uniform(0.5, 20).unwrap();
        let inc = Increments::sample(11, 32, 20, 2, false);
        let paths = simulate_stocks(&p, &grid, &inc).unwrap();
        for r in 0..32 {
            for i in 0..=20 {
                let mut mx = vec![f64::NEG_INFINITY; 2];
                for step in &paths.prices[..=i] {
                    for j in 0..2 {
                        mx[j] = mx[j].max(step.get(r, j));
                    }
                }
                let again = pathdep_sigma(&p, &mx, paths.prices[i].row(r));
                assert_eq!(again.as_slice(), paths.sigma[i].row(r));
                assert!(paths.prices[i].row(r).iter().all(|s| *s > 0.0));
            }
        }
        let switched = paths.sigma.iter().flat_map(|s| s.data().to_vec()).filter(|v| *v == 0.3).count();
        assert!(switched > 0);
    }
}
