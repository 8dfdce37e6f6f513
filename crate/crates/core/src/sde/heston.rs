use serde::{Deserialize, Serialize};

use super::{Increments, SdeError, TimeGrid};
use crate::autodiff::Tensor;

/// Heston market: `dS = S (r + A v) dt + S sqrt(v) dW^s`,
/// `dv = kappa (vbar - v) dt + xi sqrt(v) dW^v`, `d<W^s, W^v> = rho dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HestonParams {
    pub rate: f64,
    /// Market-price-of-risk slope `A`.
    pub a: f64,
    pub kappa: f64,
    pub long_run_variance: f64,
    pub xi: f64,
    pub rho: f64,
    pub v0: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        Self {
            rate: 0.05,
            a: 0.5,
            kappa: 1.0,
            long_run_variance: 0.05,
            xi: 0.5,
            rho: -0.5,
            v0: 0.5,
        }
    }
}

impl HestonParams {
    pub fn validate(&self) -> Result<(), SdeError> {
        let pos = [
            ("kappa", self.kappa),
            ("long_run_variance", self.long_run_variance),
            ("xi", self.xi),
            ("v0", self.v0),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SdeError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(SdeError::InvalidParams(format!("|rho| must be at most 1, got {}", self.rho)));
        }
        if !self.rate.is_finite() || !self.a.is_finite() {
            return Err(SdeError::InvalidParams("rate and A must be finite".into()));
        }
        Ok(())
    }

    pub fn rho_bar(&self) -> f64 {
        (1.0 - self.rho * self.rho).max(0.0).sqrt()
    }
}

/// Which state the first coordinate carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HestonSide {
    /// Wealth `x`, control `pi` (one weight per stock).
    Primal,
    /// Dual state `y`, control `gamma` (one loading per variance noise).
    Dual,
}

/// Drift (length `1+n`) and row-major diffusion (`(1+n) x 2n`) of the
/// `n`-stock Heston state `(x or y, v_1..v_n)` with independent stocks.
///
/// The noise vector is `[B^s_1..B^s_n, B^v_1..B^v_n]` of independent Brownian
/// motions, `W^s_i = B^s_i` and `W^v_i = rho B^s_i + sqrt(1-rho^2) B^v_i`.
/// Square roots use `max(v, 0)`.
pub fn heston_dynamics(
    params: &HestonParams,
    side: HestonSide,
    state: &[f64],
    control: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = state.len() - 1;
    assert_eq!(control.len(), n, "one control per stock");
    let d = n + 1;
    let cols = 2 * n;
    let w = state[0];
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d * cols];
    let rb = params.rho_bar();
    for i in 0..n {
        let v = state[1 + i].max(0.0);
        let sv = v.sqrt();
        drift[1 + i] = params.kappa * (params.long_run_variance - v);
        diff[(1 + i) * cols + i] = params.rho * params.xi * sv;
        diff[(1 + i) * cols + n + i] = rb * params.xi * sv;
    }
    match side {
        HestonSide::Primal => {
            let mut excess = 0.0;
            for i in 0..n {
                let v = state[1 + i].max(0.0);
                excess += control[i] * params.a * v;
                diff[i] = w * control[i] * v.sqrt();
            }
            drift[0] = w * (params.rate + excess);
        }
        HestonSide::Dual => {
            drift[0] = -w * params.rate;
            for i in 0..n {
                let v = state[1 + i].max(0.0);
                diff[i] = -w * params.a * v.sqrt();
                diff[n + i] = rb * w * control[i];
            }
        }
    }
    (drift, diff)
}

/// Full-truncation Euler paths of `n` independent variance processes, all
/// started at `v0`. `inc` must have `2n` columns ordered as in
/// [`heston_dynamics`]. Returns `N + 1` tensors of shape `k x n`.
pub fn simulate_variance(
    params: &HestonParams,
    grid: &TimeGrid,
    inc: &Increments,
) -> Result<Vec<Tensor>, SdeError> {
    let n = inc.dim() / 2;
    if inc.dim() != 2 * n || n == 0 || inc.num_steps() != grid.steps() {
        return Err(SdeError::Shape(format!(
            "variance needs 2n noise columns over {} steps, got {} columns over {} steps",
            grid.steps(),
            inc.dim(),
            inc.num_steps()
        )));
    }
    let k = inc.paths();
    let rb = params.rho_bar();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(Tensor::filled(k, n, params.v0));
    for i in 0..grid.steps() {
        let dt = grid.dt(i);
        let sq = dt.sqrt();
        let dw = inc.step(i);
        let prev = &out[i];
        let mut next = prev.clone();
        for r in 0..k {
            for j in 0..n {
                let v = prev.get(r, j).max(0.0);
                let noise = params.rho * dw.get(r, j) + rb * dw.get(r, n + j);
                let step = params.kappa * (params.long_run_variance - v) * dt + params.xi * v.sqrt() * sq * noise;
                next.set(r, j, prev.get(r, j) + step);
            }
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(HestonParams::default().validate().is_ok());
        let bad = HestonParams {
            rho: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = HestonParams {
            xi: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_control_primal() {
        let p = HestonParams::default();
        let (b, s) = heston_dynamics(&p, HestonSide::Primal, &[2.0, 0.3], &[0.0]);
        assert!((b[0] - 0.1).abs() < 1e-15);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
        let (b2, s2) = heston_dynamics(&p, HestonSide::Primal, &[2.0, 0.3], &[0.7]);
        assert_eq!(b[1], b2[1]);
        assert_eq!(s[2..], s2[2..]);
    }

    #[test]
    fn variance_fixed_point() {
        let p = HestonParams::default();
        let (b, _) = heston_dynamics(&p, HestonSide::Primal, &[1.0, p.long_run_variance], &[0.4]);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn dual_rows_match_display() {
        let p = HestonParams::default();
        let (y, v, g) = (1.5, 0.36, 0.2);
        let (b, s) = heston_dynamics(&p, HestonSide::Dual, &[y, v], &[g]);
        assert!((b[0] + y * p.rate).abs() < 1e-15);
        assert!((s[0] + y * p.a * 0.6).abs() < 1e-15);
        assert!((s[1] - p.rho_bar() * y * g).abs() < 1e-15);
        assert!((s[2] - p.rho * p.xi * 0.6).abs() < 1e-15);
        assert!((s[3] - p.rho_bar() * p.xi * 0.6).abs() < 1e-15);
        let (_, s0) = heston_dynamics(&p, HestonSide::Dual, &[y, v], &[0.0]);
        assert_eq!(s0[1], 0.0);
    }

    #[test]
    fn negative_variance_is_truncated() {
        let p = HestonParams::default();
        let (b, s) = heston_dynamics(&p, HestonSide::Primal, &[1.0, -0.2], &[1.0]);
        assert_eq!(b[1], p.kappa * p.long_run_variance);
        assert!(s.iter().all(|x| x.is_finite() && *x == 0.0));
    }

    #[test]
    fn two_stock_layout() {
        let p = HestonParams::default();
        let (b, s) = heston_dynamics(&p, HestonSide::Primal, &[1.0, 0.04, 0.09], &[1.0, 2.0]);
        assert!((b[0] - (0.05 + 0.5 * 0.04 + 2.0 * 0.5 * 0.09)).abs() < 1e-15);
        // rows of 4 columns: [Bs1, Bs2, Bv1, Bv2]
        assert!((s[0] - 0.2).abs() < 1e-15 && (s[1] - 0.6).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
        assert_eq!(s[4 + 1], 0.0);
        assert!((s[8 + 1] - p.rho * p.xi * 0.3).abs() < 1e-15);
    }

    #[test]
    fn variance_sim_matches_generic_euler() {
        let p = HestonParams::default();
        let grid = TimeGrid::uniform(0.5, 8).unwrap();
        let inc = Increments::sample(3, 16, 8, 2, true);
        let vs = simulate_variance(&p, &grid, &inc).unwrap();
        let mut x = Tensor::from_vec(16, 2, [1.0, p.v0].repeat(16));
        for i in 0..8 {
            let mut drift = Tensor::zeros(16, 2);
            let mut diff = Tensor::zeros(16, 4);
            for r in 0..16 {
                let (b, s) = heston_dynamics(&p, HestonSide::Primal, x.row(r), &[0.3]);
                drift.row_mut(r).copy_from_slice(&b);
                diff.row_mut(r).copy_from_slice(&s);
            }
            x = super::super::euler_step(&x, &drift, &diff, grid.dt(i), inc.step(i)).unwrap();
            for r in 0..16 {
                assert!((x.get(r, 1) - vs[i + 1].get(r, 0)).abs() < 1e-14);
            }
        }
    }
}
