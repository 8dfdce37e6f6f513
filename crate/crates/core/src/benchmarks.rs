//! Closed-form and semi-analytic reference values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::bsde2::Trajectories;
use crate::sde::{HestonParams, Increments, MarketCoefficients, TimeGrid};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("{0}")]
    Domain(String),
    #[error("Riccati solution blew up at t = {t}")]
    Blowup { t: f64 },
}

/// Reference value with its optional dual optimiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormSolution {
    pub value: f64,
    pub y_hat: Option<f64>,
    /// Short name of the formula that produced `value`.
    pub source: String,
}

/// Composite Simpson rule over `[0, horizon]` on `intervals` (even) cells.
pub fn simpson(f: impl Fn(f64) -> f64, horizon: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = horizon / n as f64;
    let mut acc = f(0.0) + f(horizon);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    acc * h / 3.0
}

/// Composite Simpson on precomputed values at `n + 1` equally spaced nodes.
fn simpson_values(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    assert!(n % 2 == 0 && n > 0, "Simpson needs an even number of cells");
    let mut acc = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// Exact solution of the unconstrained non-HARA problem with
/// `U~(y) = y^{-3}/3 + y^{-1}` in a constant-coefficient market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonHaraSolution {
    pub r: f64,
    pub theta: Vec<f64>,
    pub x0: f64,
    pub horizon: f64,
    pub y_hat: f64,
}

pub fn nonhara_value(r: f64, theta: &[f64], x0: f64, horizon: f64) -> Result<NonHaraSolution, BenchmarkError> {
    if !(x0 > 0.0) {
        return Err(BenchmarkError::Domain(format!("x0 must be positive, got {x0}")));
    }
    let th2: f64 = theta.iter().map(|t| t * t).sum();
    let b = ((r + th2) * horizon).exp();
    let a = ((3.0 * r + 6.0 * th2) * horizon).exp();
    let y_hat = ((b + (b * b + 4.0 * x0 * a).sqrt()) / (2.0 * x0)).sqrt();
    Ok(NonHaraSolution {
        r,
        theta: theta.to_vec(),
        x0,
        horizon,
        y_hat,
    })
}

impl NonHaraSolution {
    fn th2(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum()
    }

    fn factors(&self, t: f64) -> (f64, f64) {
        let tau = self.horizon - t;
        let th2 = self.th2();
        (((3.0 * self.r + 6.0 * th2) * tau).exp(), ((self.r + th2) * tau).exp())
    }

    /// `u~(t, y)`.
    pub fn dual_value_fn(&self, t: f64, y: f64) -> f64 {
        let (a, b) = self.factors(t);
        a * y.powi(-3) / 3.0 + b / y
    }

    /// `d u~/dy (t, y)`.
    pub fn dual_value_grad(&self, t: f64, y: f64) -> f64 {
        let (a, b) = self.factors(t);
        -a * y.powi(-4) - b * y.powi(-2)
    }

    /// Minimiser of `u~(t, y) + x y`, from the quadratic in `y^{-2}`.
    pub fn y_of_x(&self, t: f64, x: f64) -> f64 {
        let (a, b) = self.factors(t);
        let w = (-b + (b * b + 4.0 * a * x).sqrt()) / (2.0 * a);
        w.powf(-0.5)
    }

    /// `u(t, x) = u~(t, y*) + x y*`.
    pub fn primal_value_fn(&self, t: f64, x: f64) -> f64 {
        let y = self.y_of_x(t, x);
        self.dual_value_fn(t, y) + x * y
    }

    pub fn value(&self) -> f64 {
        self.dual_value_fn(0.0, self.y_hat) + self.x0 * self.y_hat
    }

    pub fn dual_value(&self) -> f64 {
        self.dual_value_fn(0.0, self.y_hat)
    }

    pub fn solution(&self) -> ClosedFormSolution {
        ClosedFormSolution {
            value: self.value(),
            y_hat: Some(self.y_hat),
            source: "nonhara-closed-form".into(),
        }
    }

    /// `Y(t) = y exp(-(r + |theta|^2/2) t - theta^T W(t))`.
    pub fn y_path(&self, t: f64, w: &[f64]) -> f64 {
        let tw: f64 = self.theta.iter().zip(w).map(|(a, b)| a * b).sum();
        self.y_hat * (-(self.r + 0.5 * self.th2()) * t - tw).exp()
    }

    /// Optimal wealth `a1 S1 + a2 S2` with
    /// `S1 = exp((r - 4|theta|^2) t + 4 theta^T W)`, `S2 = exp(r t + 2 theta^T W)`.
    pub fn x_path(&self, t: f64, w: &[f64]) -> f64 {
        let th2 = self.th2();
        let tw: f64 = self.theta.iter().zip(w).map(|(a, b)| a * b).sum();
        let (a_t, b_t) = self.factors(0.0);
        let a1 = self.y_hat.powi(-4) * a_t;
        let a2 = self.y_hat.powi(-2) * b_t;
        a1 * ((self.r - 4.0 * th2) * t + 4.0 * tw).exp() + a2 * (self.r * t + 2.0 * tw).exp()
    }

    /// Exact primal and dual `(state, V, Z)` processes along `inc`; controls
    /// and `Gamma` are left empty.
    pub fn trajectories(&self, grid: &TimeGrid, inc: &Increments) -> (Trajectories, Trajectories) {
        let k = inc.paths();
        let m = inc.dim();
        let mut w = Tensor::zeros(k, m);
        let mut primal = Trajectories {
            x: vec![],
            u: vec![],
            v: vec![],
            z: vec![],
            gamma: vec![],
        };
        let mut dual = primal.clone();
        for i in 0..=grid.steps() {
            if i > 0 {
                let sq = grid.dt(i - 1).sqrt();
                w = w.zip_map(inc.step(i - 1), |a, b| a + sq * b);
            }
            let t = grid.t(i);
            let mut x = Tensor::zeros(k, 1);
            let mut v1 = Tensor::zeros(k, 1);
            let mut z1 = Tensor::zeros(k, 1);
            let mut y = Tensor::zeros(k, 1);
            let mut v2 = Tensor::zeros(k, 1);
            let mut z2 = Tensor::zeros(k, 1);
            for r in 0..k {
                let xv = self.x_path(t, w.row(r));
                let yv = self.y_path(t, w.row(r));
                x.set(r, 0, xv);
                v1.set(r, 0, self.primal_value_fn(t, xv));
                z1.set(r, 0, self.y_of_x(t, xv));
                y.set(r, 0, yv);
                v2.set(r, 0, self.dual_value_fn(t, yv));
                z2.set(r, 0, self.dual_value_grad(t, yv));
            }
            primal.x.push(x);
            primal.v.push(v1);
            primal.z.push(z1);
            dual.x.push(y);
            dual.v.push(v2);
            dual.z.push(z2);
        }
        (primal, dual)
    }
}

/// `u~(t, y) = U~(y) exp(int_t^T [p |theta^|^2 / (2(p-1)^2) - p r/(p-1)] ds)`
/// solution of the power-utility problem with a deterministic `|theta^|^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertonSolution {
    pub p: f64,
    pub x0: f64,
    pub horizon: f64,
    /// `int_0^T [p |theta^|^2/(2(p-1)^2) - p r/(p-1)] ds`.
    pub exponent: f64,
    pub y_hat: f64,
    pub value: f64,
    pub dual_value: f64,
}

fn merton_from_exponent(p: f64, x0: f64, horizon: f64, c: f64) -> MertonSolution {
    let y_hat = x0.powf(p - 1.0) * ((1.0 - p) * c).exp();
    let dual_value = (1.0 - p) / p * y_hat.powf(p / (p - 1.0)) * c.exp();
    MertonSolution {
        p,
        x0,
        horizon,
        exponent: c,
        y_hat,
        value: dual_value + x0 * y_hat,
        dual_value,
    }
}

impl MertonSolution {
    pub fn solution(&self) -> ClosedFormSolution {
        ClosedFormSolution {
            value: self.value,
            y_hat: Some(self.y_hat),
            source: "merton-dual-quadrature".into(),
        }
    }
}

fn check_power(p: f64, x0: f64) -> Result<(), BenchmarkError> {
    if !(p > 0.0 && p < 1.0) || !(x0 > 0.0) {
        return Err(BenchmarkError::Domain(format!("need 0 < p < 1 and x0 > 0, got p = {p}, x0 = {x0}")));
    }
    Ok(())
}

fn largest_eigenvalue(q: &DMatrix<f64>) -> f64 {
    q.clone().symmetric_eigen().eigenvalues.max()
}

/// `argmin_{v >= 0} |theta + M v|^2` by accelerated projected gradient.
pub fn cone_minimiser(theta: &DVector<f64>, m_inv: &DMatrix<f64>, start: Option<&DVector<f64>>) -> DVector<f64> {
    let q = m_inv.transpose() * m_inv;
    let c = m_inv.transpose() * theta;
    let step = 1.0 / largest_eigenvalue(&q);
    let n = theta.len();
    let mut v = start.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut prev = v.clone();
    let mut mom = 1.0f64;
    for _ in 0..200_000 {
        let next_mom = 0.5 * (1.0 + (1.0 + 4.0 * mom * mom).sqrt());
        let yk = &v + (&v - &prev) * ((mom - 1.0) / next_mom);
        let grad = &c + &q * &yk;
        let cand = (yk - grad * step).map(|x| x.max(0.0));
        // restart when the objective would increase
        let obj = |x: &DVector<f64>| (theta + m_inv * x).norm_squared();
        let (cand, restart) = if obj(&cand) > obj(&v) {
            let g = &c + &q * &v;
            ((&v - g * step).map(|x| x.max(0.0)), true)
        } else {
            (cand, false)
        };
        let change = (&cand - &v).amax();
        prev = v;
        v = cand;
        mom = if restart { 1.0 } else { next_mom };
        if change < 1e-15 {
            break;
        }
    }
    v
}

/// `argmin_v R|v| + |theta + M v|^2 / 2` by accelerated proximal gradient
/// with block soft thresholding.
pub fn ball_minimiser(theta: &DVector<f64>, m_inv: &DMatrix<f64>, radius: f64) -> DVector<f64> {
    let q = m_inv.transpose() * m_inv;
    let c = m_inv.transpose() * theta;
    let step = 1.0 / largest_eigenvalue(&q);
    let shrink = |x: DVector<f64>| {
        let nrm = x.norm();
        if nrm <= step * radius {
            DVector::zeros(x.len())
        } else {
            x * (1.0 - step * radius / nrm)
        }
    };
    let obj = |x: &DVector<f64>| radius * x.norm() + 0.5 * (theta + m_inv * x).norm_squared();
    let mut v = DVector::zeros(theta.len());
    let mut prev = v.clone();
    let mut mom = 1.0f64;
    for _ in 0..200_000 {
        let next_mom = 0.5 * (1.0 + (1.0 + 4.0 * mom * mom).sqrt());
        let yk = &v + (&v - &prev) * ((mom - 1.0) / next_mom);
        let grad = &c + &q * &yk;
        let mut cand = shrink(yk - grad * step);
        let mut restart = false;
        if obj(&cand) > obj(&v) {
            let g = &c + &q * &v;
            cand = shrink(&v - g * step);
            restart = true;
        }
        let change = (&cand - &v).amax();
        prev = v;
        v = cand;
        mom = if restart { 1.0 } else { next_mom };
        if change < 1e-15 {
            break;
        }
    }
    v
}

fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Power-utility value with `K = R_+^m`: `|theta^(t)|^2` from the cone
/// minimiser on every quadrature node, then Simpson.
pub fn merton_cone_solution(
    market: &MarketCoefficients,
    p: f64,
    x0: f64,
    horizon: f64,
    intervals: usize,
) -> Result<MertonSolution, BenchmarkError> {
    check_power(p, x0)?;
    let n = intervals + intervals % 2;
    let h = horizon / n as f64;
    let mut prev: Option<DVector<f64>> = None;
    let mut integrand = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 * h;
        let theta = dvec(&market.theta(t));
        let inv = market.sigma_inv(t);
        let v = cone_minimiser(&theta, &inv, prev.as_ref());
        let th = (&theta + &inv * &v).norm_squared();
        integrand.push(p * th / (2.0 * (p - 1.0).powi(2)) - p / (p - 1.0) * market.r(t));
        prev = Some(v);
    }
    Ok(merton_from_exponent(p, x0, horizon, simpson_values(&integrand, h)))
}

/// Power-utility value with `K = R^m` (`theta^ = theta`).
pub fn merton_unconstrained_solution(
    market: &MarketCoefficients,
    p: f64,
    x0: f64,
    horizon: f64,
    intervals: usize,
) -> Result<MertonSolution, BenchmarkError> {
    check_power(p, x0)?;
    let c = simpson(
        |t| {
            let th: f64 = market.theta(t).iter().map(|a| a * a).sum();
            p * th / (2.0 * (p - 1.0).powi(2)) - p / (p - 1.0) * market.r(t)
        },
        horizon,
        intervals,
    );
    Ok(merton_from_exponent(p, x0, horizon, c))
}

/// Log-utility value with `K = B(0, R)`:
/// `log x0 + int_0^T [r + R|v^| + |theta + sigma^{-1} v^|^2/2] dt`, `y^ = 1/x0`.
pub fn log_ball_solution(
    market: &MarketCoefficients,
    radius: f64,
    x0: f64,
    horizon: f64,
    intervals: usize,
) -> Result<ClosedFormSolution, BenchmarkError> {
    if !(x0 > 0.0) || !(radius > 0.0) {
        return Err(BenchmarkError::Domain(format!("need x0 > 0 and R > 0, got {x0}, {radius}")));
    }
    let n = intervals + intervals % 2;
    let h = horizon / n as f64;
    let integrand: Vec<f64> = (0..=n)
        .map(|i| {
            let t = i as f64 * h;
            let theta = dvec(&market.theta(t));
            let inv = market.sigma_inv(t);
            let v = ball_minimiser(&theta, &inv, radius);
            market.r(t) + radius * v.norm() + 0.5 * (&theta + &inv * &v).norm_squared()
        })
        .collect();
    Ok(ClosedFormSolution {
        value: x0.ln() + simpson_values(&integrand, h),
        y_hat: Some(1.0 / x0),
        source: "log-ball-quadrature".into(),
    })
}

/// Log-utility value with `K = R^m`: `log x0 + int_0^T [r + |theta|^2/2] dt`.
pub fn log_unconstrained_solution(
    market: &MarketCoefficients,
    x0: f64,
    horizon: f64,
    intervals: usize,
) -> Result<ClosedFormSolution, BenchmarkError> {
    if !(x0 > 0.0) {
        return Err(BenchmarkError::Domain(format!("need x0 > 0, got {x0}")));
    }
    let integral = simpson(
        |t| market.r(t) + 0.5 * market.theta(t).iter().map(|a| a * a).sum::<f64>(),
        horizon,
        intervals,
    );
    Ok(ClosedFormSolution {
        value: x0.ln() + integral,
        y_hat: Some(1.0 / x0),
        source: "log-merton-quadrature".into(),
    })
}

/// `C, D` of `u(t, x, v) = x^p/p exp(C(t) + D(t) v)` on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiPair {
    pub times: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub p: f64,
}

impl RiccatiPair {
    pub fn value(&self, x0: f64, v0: f64) -> f64 {
        x0.powf(self.p) / self.p * (self.c[0] + self.d[0] * v0).exp()
    }

    /// Optimal fraction `(A + rho xi D(t)) / (1 - p)` at grid index `i`.
    pub fn optimal_fraction(&self, params: &HestonParams, i: usize) -> f64 {
        (params.a + params.rho * params.xi * self.d[i]) / (1.0 - self.p)
    }
}

/// Backward RK4 for
/// `D' = -p (A + rho xi D)^2 / (2(1-p)) + kappa D - xi^2 D^2 / 2`,
/// `C' = -p r - kappa vbar D`, `C(T) = D(T) = 0`.
pub fn heston_riccati(
    params: &HestonParams,
    p: f64,
    horizon: f64,
    steps: usize,
) -> Result<RiccatiPair, BenchmarkError> {
    if !(p > 0.0 && p < 1.0) || steps == 0 || !(horizon > 0.0) {
        return Err(BenchmarkError::Domain(format!(
            "need 0 < p < 1, T > 0 and steps > 0, got p = {p}, T = {horizon}, steps = {steps}"
        )));
    }
    let HestonParams {
        rate,
        a,
        kappa,
        long_run_variance,
        xi,
        rho,
        ..
    } = *params;
    // derivatives of (C, D) in tau = T - t
    let rhs = |d: f64| -> (f64, f64) {
        let dc = p * rate + kappa * long_run_variance * d;
        let dd = p * (a + rho * xi * d).powi(2) / (2.0 * (1.0 - p)) - kappa * d + 0.5 * xi * xi * d * d;
        (dc, dd)
    };
    let h = horizon / steps as f64;
    let mut c = vec![0.0; steps + 1];
    let mut d = vec![0.0; steps + 1];
    let (mut cc, mut dd) = (0.0f64, 0.0f64);
    for s in 0..steps {
        let (k1c, k1d) = rhs(dd);
        let (k2c, k2d) = rhs(dd + 0.5 * h * k1d);
        let (k3c, k3d) = rhs(dd + 0.5 * h * k2d);
        let (k4c, k4d) = rhs(dd + h * k3d);
        cc += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
        dd += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        if !cc.is_finite() || !dd.is_finite() || dd.abs() > 1e12 {
            return Err(BenchmarkError::Blowup {
                t: horizon - (s + 1) as f64 * h,
            });
        }
        c[steps - 1 - s] = cc;
        d[steps - 1 - s] = dd;
    }
    Ok(RiccatiPair {
        times: (0..=steps).map(|i| i as f64 * h).collect(),
        c,
        d,
        p,
    })
}

/// `u(0, x0, v0)` for power utility in the one-stock Heston market,
/// integrated with `10^4` RK4 steps.
pub fn heston_riccati_value(params: &HestonParams, p: f64, x0: f64, v0: f64, horizon: f64) -> Result<f64, BenchmarkError> {
    Ok(heston_riccati(params, p, horizon, 10_000)?.value(x0, v0))
}

/// Explicit upwind finite-difference solve of the reduced HJB equation for
/// `phi(t, v)` in `u = x^p/p phi`:
/// `phi_t + p r phi + p v (A phi + rho xi phi_v)^2 / (2 (1-p) phi)
///  + kappa (vbar - v) phi_v + xi^2 v phi_vv / 2 = 0`, `phi(T) = 1`.
/// Returns `x0^p/p phi(0, v0)`.
pub fn heston_fd_value(
    params: &HestonParams,
    p: f64,
    x0: f64,
    v0: f64,
    horizon: f64,
    v_max: f64,
    cells: usize,
) -> f64 {
    let HestonParams {
        rate,
        a,
        kappa,
        long_run_variance,
        xi,
        rho,
        ..
    } = *params;
    let dv = v_max / cells as f64;
    let stable = 0.4 * dv * dv / (xi * xi * v_max).max(1e-12);
    let steps = (horizon / stable).ceil() as usize;
    let dt = horizon / steps as f64;
    let mut phi = vec![1.0; cells + 1];
    for _ in 0..steps {
        let mut next = phi.clone();
        for j in 0..=cells {
            let v = j as f64 * dv;
            let drift = kappa * (long_run_variance - v);
            let first = if j == 0 {
                (phi[1] - phi[0]) / dv
            } else if j == cells {
                (phi[j] - phi[j - 1]) / dv
            } else if drift >= 0.0 && v == 0.0 {
                (phi[j + 1] - phi[j]) / dv
            } else {
                (phi[j + 1] - phi[j - 1]) / (2.0 * dv)
            };
            let upwind = if j > 0 && j < cells {
                if drift >= 0.0 {
                    (phi[j + 1] - phi[j]) / dv
                } else {
                    (phi[j] - phi[j - 1]) / dv
                }
            } else {
                first
            };
            let second = if j > 0 && j < cells {
                (phi[j + 1] - 2.0 * phi[j] + phi[j - 1]) / (dv * dv)
            } else {
                0.0
            };
            let ham = p * v * (a * phi[j] + rho * xi * first).powi(2) / (2.0 * (1.0 - p) * phi[j]);
            let rhs = p * rate * phi[j] + ham + drift * upwind + 0.5 * xi * xi * v * second;
            next[j] = phi[j] + dt * rhs;
        }
        phi = next;
    }
    let pos = v0 / dv;
    let j = (pos.floor() as usize).min(cells - 1);
    let w = pos - j as f64;
    let val = (1.0 - w) * phi[j] + w * phi[j + 1];
    x0.powf(p) / p * val
}

/// Pathwise residuals of the primal-dual relations
/// `X = -Z_2`, `V_1 = V_2 - Z_2 Y`, `Z_1 = Y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityResiduals {
    /// `max |X + Z_2| / x0`.
    pub state: f64,
    /// `max |V_1 - (V_2 - Z_2 Y)| / |V_1|`.
    pub value: f64,
    /// `max |Z_1 - Y| / |Y|`.
    pub gradient: f64,
}

impl DualityResiduals {
    pub fn max(&self) -> f64 {
        self.state.max(self.value).max(self.gradient)
    }
}

/// Compares primal and dual trajectories simulated on shared increments.
/// Only the first state coordinate of each side is used.
pub fn duality_relation_check(primal: &Trajectories, dual: &Trajectories, x0: f64) -> DualityResiduals {
    let mut out = DualityResiduals {
        state: 0.0,
        value: 0.0,
        gradient: 0.0,
    };
    let steps = primal.x.len().min(dual.x.len());
    for i in 0..steps {
        let k = primal.x[i].rows();
        for r in 0..k {
            let x = primal.x[i].get(r, 0);
            let v1 = primal.v[i].get(r, 0);
            let z1 = primal.z[i].get(r, 0);
            let y = dual.x[i].get(r, 0);
            let v2 = dual.v[i].get(r, 0);
            let z2 = dual.z[i].get(r, 0);
            out.state = out.state.max((x + z2).abs() / x0);
            out.value = out.value.max((v1 - (v2 - z2 * y)).abs() / v1.abs());
            out.gradient = out.gradient.max((z1 - y).abs() / y.abs());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::ConstraintSet;
    use crate::utility::UtilitySpec;

    #[test]
    fn nonhara_zero_rates_reduce_to_utility() {
        let s = nonhara_value(0.0, &[0.0, 0.0], 2.0, 1.0).unwrap();
        assert!((s.y_hat - 1.0).abs() < 1e-15);
        assert!((s.value() - 10.0 / 3.0).abs() < 1e-14);
        let (u, _, _) = UtilitySpec::NonHara.u_eval(2.0).unwrap();
        assert!((u - 10.0 / 3.0).abs() < 1e-12);
        assert!(nonhara_value(0.05, &[0.1], 0.0, 1.0).is_err());
    }

    #[test]
    fn nonhara_terminal_consistency() {
        let s = nonhara_value(0.05, &[0.3, -0.1], 1.0, 0.5).unwrap();
        for y in [0.3, 1.0, 2.5] {
            let (ud, dd) = UtilitySpec::NonHara.dual_eval(y).unwrap();
            assert!((s.dual_value_fn(0.5, y) - ud).abs() < 1e-13 * ud.abs());
            assert!((s.dual_value_grad(0.5, y) - dd).abs() < 1e-13 * dd.abs());
        }
        // y^ minimises u~(0, y) + x0 y
        let obj = |y: f64| s.dual_value_fn(0.0, y) + y;
        let h = 1e-5;
        assert!(((obj(s.y_hat + h) - obj(s.y_hat - h)) / (2.0 * h)).abs() < 1e-8);
        assert!(obj(s.y_hat) <= obj(s.y_hat * 1.01) && obj(s.y_hat) <= obj(s.y_hat * 0.99));
        assert!((s.x_path(0.0, &[0.0, 0.0]) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn nonhara_primal_value_solves_its_pde() {
        // u_t + r x u_x - |theta|^2 u_x^2 / (2 u_xx) = 0 in a complete market
        let s = nonhara_value(0.05, &[0.2, 0.1], 1.0, 0.5).unwrap();
        let th2 = 0.05;
        let (t, x, h) = (0.2, 1.3, 1e-4);
        let u = |t: f64, x: f64| s.primal_value_fn(t, x);
        let ut = (u(t + h, x) - u(t - h, x)) / (2.0 * h);
        let ux = (u(t, x + h) - u(t, x - h)) / (2.0 * h);
        let uxx = (u(t, x + h) - 2.0 * u(t, x) + u(t, x - h)) / (h * h);
        let res = ut + 0.05 * x * ux - th2 * ux * ux / (2.0 * uxx);
        assert!(res.abs() < 1e-5, "{res}");
        assert!((ux - s.y_of_x(t, x)).abs() < 1e-7);
    }

    #[test]
    fn exact_processes_satisfy_duality_relations() {
        let market = MarketCoefficients::example1(11, 5);
        let s = nonhara_value(0.05, &market.theta(0.0), 1.0, 0.5).unwrap();
        let grid = TimeGrid::uniform(0.5, 20).unwrap();
        let inc = Increments::sample(5, 32, 20, 5, true);
        let (p, d) = s.trajectories(&grid, &inc);
        let res = duality_relation_check(&p, &d, 1.0);
        assert!(res.max() < 1e-10, "{res:?}");
        assert!((p.v[0].get(0, 0) - s.value()).abs() < 1e-12);
    }

    #[test]
    fn duality_check_flags_mismatch() {
        let mk = |x: f64| Trajectories {
            x: vec![Tensor::scalar(x)],
            u: vec![],
            v: vec![Tensor::scalar(1.0)],
            z: vec![Tensor::scalar(1.0)],
            gamma: vec![],
        };
        let dual = Trajectories {
            x: vec![Tensor::scalar(1.0)],
            u: vec![],
            v: vec![Tensor::scalar(0.0)],
            z: vec![Tensor::scalar(-1.0)],
            gamma: vec![],
        };
        assert_eq!(duality_relation_check(&mk(1.0), &dual, 1.0).max(), 0.0);
        assert!(duality_relation_check(&mk(1.5), &dual, 1.0).state > 0.4);
    }

    fn example2(m: usize) -> MarketCoefficients {
        MarketCoefficients::example2(3, m)
    }

    #[test]
    fn merton_unconstrained_matches_closed_form() {
        let market = MarketCoefficients::constant(0.05, &[0.1, 0.07], &[vec![0.2, 0.0], vec![0.05, 0.3]]).unwrap();
        let th2: f64 = market.theta(0.0).iter().map(|t| t * t).sum();
        let p = 0.5;
        let s = merton_unconstrained_solution(&market, p, 1.0, 0.5, 100).unwrap();
        let expect = 2.0 * (p * (0.05 + th2 / (2.0 * (1.0 - p))) * 0.5).exp();
        assert!((s.value - expect).abs() < 1e-13);
        // theta^ = 0 reduces to bond growth: u~(0, y) = U~(y) e^{-p/(p-1) int r}
        let flat = MarketCoefficients::constant(0.05, &[0.05], &[vec![0.3]]).unwrap();
        let s = merton_unconstrained_solution(&flat, p, 1.0, 0.5, 100).unwrap();
        let (ud, _) = UtilitySpec::Power { p }.dual_eval(s.y_hat).unwrap();
        assert!((s.dual_value - ud * (p / (1.0 - p) * 0.05 * 0.5).exp()).abs() < 1e-14);
        assert!((s.value - 2.0 * (0.025f64 * 0.5).exp()).abs() < 1e-14);
    }

    #[test]
    fn cone_minimiser_examples() {
        // theta already in the cone: v = 0
        let inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 3.0]);
        let v = cone_minimiser(&dvec(&[0.3, 0.2]), &inv, None);
        assert_eq!(v.amax(), 0.0);
        // diagonal: v_i = max(0, -sigma_i theta_i)
        let inv = DMatrix::from_diagonal(&dvec(&[2.0, 4.0]));
        let v = cone_minimiser(&dvec(&[-0.3, 0.2]), &inv, None);
        assert!((v[0] - 0.15).abs() < 1e-14 && v[1] == 0.0);
        // KKT on a coupled instance
        let inv = DMatrix::from_row_slice(3, 3, &[2.0, -0.5, 0.1, 0.3, 2.5, -0.4, 0.0, 0.2, 1.5]);
        let theta = dvec(&[-0.4, 0.3, -0.2]);
        let v = cone_minimiser(&theta, &inv, None);
        let g = inv.transpose() * (&theta + &inv * &v);
        for i in 0..3 {
            assert!(v[i] >= 0.0);
            assert!(g[i] >= -1e-12);
            assert!((v[i] * g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_minimiser_examples() {
        let inv = DMatrix::from_diagonal(&dvec(&[2.0, 2.0]));
        // small theta: unconstrained pi = sigma^{-T} theta inside the ball, v = 0
        assert_eq!(ball_minimiser(&dvec(&[0.1, 0.05]), &inv, 1.0).amax(), 0.0);
        // isotropic case: v = -sigma (theta - R sigma theta/|theta| ... ) in closed form
        let theta = dvec(&[1.2, -0.9]);
        let r = 0.5;
        let v = ball_minimiser(&theta, &inv, r);
        // first-order condition R v/|v| + M^T (theta + M v) = 0
        let g = inv.transpose() * (&theta + &inv * &v) + &v * (r / v.norm());
        assert!(g.amax() < 1e-12);
        // huge radius: v = 0
        assert_eq!(ball_minimiser(&theta, &inv, 1e6).amax(), 0.0);
    }

    #[test]
    fn log_ball_limits() {
        let market = MarketCoefficients::example3(4, 3);
        let big = log_ball_solution(&market, 1e6, 2.0, 0.5, 200).unwrap();
        let free = log_unconstrained_solution(&market, 2.0, 0.5, 200).unwrap().value;
        assert!((big.value - free).abs() < 1e-12);
        let tight = log_ball_solution(&market, 0.2, 2.0, 0.5, 200).unwrap();
        assert!(tight.value < big.value);
        assert_eq!(tight.y_hat, Some(0.5));
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let market = MarketCoefficients::example3(9, 20);
        let a = log_ball_solution(&market, 1.0, 5.0, 0.5, 1000).unwrap().value;
        let b = log_ball_solution(&market, 1.0, 5.0, 0.5, 2000).unwrap().value;
        assert!((a - b).abs() < 1e-8, "{a} {b}");
        let market = example2(8);
        let a = merton_cone_solution(&market, 0.5, 1.0, 0.5, 1000).unwrap().value;
        let b = merton_cone_solution(&market, 0.5, 1.0, 0.5, 2000).unwrap().value;
        assert!((a - b).abs() < 1e-8, "{a} {b}");
    }

    #[test]
    fn cone_solution_dominated_by_unconstrained() {
        let market = example2(6);
        let cone = merton_cone_solution(&market, 0.5, 1.0, 0.5, 200).unwrap();
        let free = merton_unconstrained_solution(&market, 0.5, 1.0, 0.5, 200).unwrap();
        assert!(cone.value <= free.value + 1e-14);
        assert!(cone.value >= 2.0 * (0.05f64 * 0.5 * 0.5).exp() - 1e-14);
        let _ = ConstraintSet::Cone { m: 6 };
    }

    #[test]
    fn riccati_terminal_and_monotone() {
        let params = HestonParams::default();
        let pair = heston_riccati(&params, 0.5, 0.5, 1000).unwrap();
        assert_eq!(*pair.c.last().unwrap(), 0.0);
        assert_eq!(*pair.d.last().unwrap(), 0.0);
        assert!((pair.value(1.0, 0.5) - heston_riccati_value(&params, 0.5, 1.0, 0.5, 0.5).unwrap()).abs() < 1e-10);
        let vals: Vec<f64> = [0.2, 0.5, 1.0]
            .iter()
            .map(|t| heston_riccati_value(&params, 0.5, 1.0, 0.5, *t).unwrap())
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2]);
        assert!((vals[0] - 2.03289).abs() < 5e-6);
        assert!((vals[1] - 2.07556).abs() < 5e-6, "{vals:?}");
    }

    #[test]
    fn riccati_frozen_variance_is_merton() {
        let params = HestonParams {
            xi: 1e-9,
            kappa: 50.0,
            long_run_variance: 0.3,
            v0: 0.3,
            ..Default::default()
        };
        let v = heston_riccati_value(&params, 0.5, 1.0, 0.3, 0.5).unwrap();
        let market = MarketCoefficients::constant(0.05, &[0.05 + 0.5 * 0.3], &[vec![0.3f64.sqrt()]]).unwrap();
        let m = merton_unconstrained_solution(&market, 0.5, 1.0, 0.5, 100).unwrap();
        assert!((v - m.value).abs() < 1e-9, "{v} {}", m.value);
    }

    #[test]
    fn riccati_agrees_with_finite_differences() {
        let params = HestonParams::default();
        for t in [0.2, 0.5] {
            let ode = heston_riccati_value(&params, 0.5, 1.0, 0.5, t).unwrap();
            let fd = heston_fd_value(&params, 0.5, 1.0, 0.5, t, 3.0, 150);
            assert!((ode - fd).abs() / ode < 2e-4, "T={t}: {ode} vs {fd}");
        }
    }

    #[test]
    fn riccati_rejects_bad_input() {
        assert!(heston_riccati(&HestonParams::default(), 1.5, 1.0, 10).is_err());
        let wild = HestonParams {
            a: 50.0,
            xi: 5.0,
            rho: 0.9,
            ..Default::default()
        };
        assert!(matches!(heston_riccati(&wild, 0.9, 50.0, 1000), Err(BenchmarkError::Blowup { .. })));
    }
}
