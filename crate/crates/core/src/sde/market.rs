use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SdeError;
use crate::constraint::ConstraintSet;

/// Stock drift `mu(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    Constant { mu: Vec<f64> },
    /// `mu_i(t) = base + amplitude * sin(frequency * t + phase_i)`.
    Sinusoidal {
        base: f64,
        amplitude: f64,
        frequency: f64,
        phases: Vec<f64>,
    },
}

/// Volatility matrix `sigma(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VolSpec {
    /// Row-major `m x m` matrix.
    Constant { matrix: Vec<Vec<f64>> },
    /// Diagonal with `sigma_i(t) = base + amplitude * sin(frequency * t + phase_i)`.
    SinusoidalDiagonal {
        base: f64,
        amplitude: f64,
        frequency: f64,
        phases: Vec<f64>,
    },
}

/// Deterministic Black–Scholes coefficients: constant rate `r`, drift
/// `mu(t)` and invertible volatility `sigma(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketCoefficients {
    pub rate: f64,
    pub drift: DriftSpec,
    pub vol: VolSpec,
}

impl MarketCoefficients {
    pub fn new(rate: f64, drift: DriftSpec, vol: VolSpec) -> Result<Self, SdeError> {
        let market = Self { rate, drift, vol };
        market.validate()?;
        Ok(market)
    }

    pub fn constant(rate: f64, mu: &[f64], sigma: &[Vec<f64>]) -> Result<Self, SdeError> {
        Self::new(
            rate,
            DriftSpec::Constant { mu: mu.to_vec() },
            VolSpec::Constant {
                matrix: sigma.to_vec(),
            },
        )
    }

    /// Five stocks, `r = 0.05`, `mu = 0.06`, `sigma` uniform on `[0, 0.2]`
    /// entrywise plus `0.2` on the diagonal.
    pub fn example1(seed: u64, m: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| rng.random_range(0.0..0.2) + if i == j { 0.2 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(
            0.05,
            DriftSpec::Constant { mu: vec![0.06; m] },
            VolSpec::Constant { matrix },
        )
        .expect("diagonally dominant volatility is invertible")
    }

    /// `mu_i(t) = 0.04 + sin(pi t + A_i)/50`, `sigma` with `0.4` on the
    /// diagonal and `0.2` elsewhere.
    pub fn example2(seed: u64, m: usize) -> Self {
        let phases = random_phases(seed, m);
        let matrix = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 0.4 } else { 0.2 }).collect())
            .collect();
        Self::new(
            0.05,
            DriftSpec::Sinusoidal {
                base: 0.04,
                amplitude: 0.02,
                frequency: PI,
                phases,
            },
            VolSpec::Constant { matrix },
        )
        .expect("0.2 + 0.2 I is invertible")
    }

    /// `mu = 0.07`, diagonal `sigma_i(t) = (4 + 2 sin(2 pi t + A_i))/10`.
    pub fn example3(seed: u64, m: usize) -> Self {
        Self::new(
            0.05,
            DriftSpec::Constant { mu: vec![0.07; m] },
            VolSpec::SinusoidalDiagonal {
                base: 0.4,
                amplitude: 0.2,
                frequency: 2.0 * PI,
                phases: random_phases(seed, m),
            },
        )
        .expect("volatility bounded below by 0.2")
    }

    pub fn dim(&self) -> usize {
        match &self.drift {
            DriftSpec::Constant { mu } => mu.len(),
            DriftSpec::Sinusoidal { phases, .. } => phases.len(),
        }
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        let m = self.dim();
        let bad = |s: String| Err(SdeError::InvalidParams(s));
        if m == 0 {
            return bad("market needs at least one stock".into());
        }
        if !self.rate.is_finite() {
            return bad("rate must be finite".into());
        }
        match &self.vol {
            VolSpec::Constant { matrix } => {
                if matrix.len() != m || matrix.iter().any(|r| r.len() != m) {
                    return bad(format!("volatility matrix must be {m}x{m}"));
                }
                if self.sigma(0.0).try_inverse().is_none() {
                    return bad("volatility matrix is singular".into());
                }
            }
            VolSpec::SinusoidalDiagonal {
                base,
                amplitude,
                phases,
                ..
            } => {
                if phases.len() != m {
                    return bad(format!("expected {m} volatility phases"));
                }
                if base.abs() <= amplitude.abs() {
                    return bad("sinusoidal volatility must stay away from zero".into());
                }
            }
        }
        Ok(())
    }

    pub fn r(&self, _t: f64) -> f64 {
        self.rate
    }

    pub fn mu(&self, t: f64) -> Vec<f64> {
        match &self.drift {
            DriftSpec::Constant { mu } => mu.clone(),
            DriftSpec::Sinusoidal {
                base,
                amplitude,
                frequency,
                phases,
            } => phases
                .iter()
                .map(|a| base + amplitude * (frequency * t + a).sin())
                .collect(),
        }
    }

    /// Excess return `b(t) = mu(t) - r 1`.
    pub fn excess(&self, t: f64) -> Vec<f64> {
        let r = self.r(t);
        self.mu(t).into_iter().map(|m| m - r).collect()
    }

    pub fn sigma(&self, t: f64) -> DMatrix<f64> {
        match &self.vol {
            VolSpec::Constant { matrix } => {
                let m = matrix.len();
                DMatrix::from_fn(m, m, |i, j| matrix[i][j])
            }
            VolSpec::SinusoidalDiagonal {
                base,
                amplitude,
                frequency,
                phases,
            } => {
                let d: Vec<f64> = phases
                    .iter()
                    .map(|a| base + amplitude * (frequency * t + a).sin())
                    .collect();
                DMatrix::from_diagonal(&DVector::from_vec(d))
            }
        }
    }

    pub fn sigma_inv(&self, t: f64) -> DMatrix<f64> {
        self.sigma(t)
            .try_inverse()
            .expect("volatility validated invertible")
    }

    /// Market price of risk `theta(t) = sigma(t)^{-1} b(t)`.
    pub fn theta(&self, t: f64) -> Vec<f64> {
        let b = DVector::from_vec(self.excess(t));
        (self.sigma_inv(t) * b).iter().copied().collect()
    }

    /// Whether drift and volatility are constant in time.
    pub fn is_time_homogeneous(&self) -> bool {
        matches!(
            (&self.drift, &self.vol),
            (DriftSpec::Constant { .. }, VolSpec::Constant { .. })
        )
    }
}

fn random_phases(seed: u64, m: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
}

/// Wealth drift `x (r + pi^T b)` and diffusion row `x pi^T sigma`.
pub fn wealth_dynamics(coeffs: &MarketCoefficients, t: f64, x: f64, pi: &[f64]) -> (f64, Vec<f64>) {
    let b = coeffs.excess(t);
    let drift = x * (coeffs.r(t) + pi.iter().zip(&b).map(|(p, b)| p * b).sum::<f64>());
    let sigma = coeffs.sigma(t);
    let m = pi.len();
    let diffusion = (0..m)
        .map(|k| x * (0..m).map(|i| pi[i] * sigma[(i, k)]).sum::<f64>())
        .collect();
    (drift, diffusion)
}

/// Dual drift `-y (r + delta_K(v))` and diffusion row `-y (theta + sigma^{-1} v)^T`.
pub fn dual_dynamics(
    coeffs: &MarketCoefficients,
    constraint: &ConstraintSet,
    t: f64,
    y: f64,
    v: &[f64],
) -> Result<(f64, Vec<f64>), SdeError> {
    let delta = constraint.support(v);
    if !delta.is_finite() {
        return Err(SdeError::InfiniteSupport);
    }
    let theta = coeffs.theta(t);
    let shift = coeffs.sigma_inv(t) * DVector::from_column_slice(v);
    let drift = -y * (coeffs.r(t) + delta);
    let diffusion = theta
        .iter()
        .zip(shift.iter())
        .map(|(a, b)| -y * (a + b))
        .collect();
    Ok((drift, diffusion))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> MarketCoefficients {
        MarketCoefficients::constant(0.0, &[0.06], &[vec![0.2]]).unwrap()
    }

    #[test]
    fn wealth_examples() {
        let c = MarketCoefficients::constant(0.05, &[0.06], &[vec![0.2]]).unwrap();
        assert_eq!(wealth_dynamics(&c, 0.0, 2.0, &[0.0]), (0.1, vec![0.0]));
        let (b, s) = wealth_dynamics(&single(), 0.0, 1.0, &[1.0]);
        assert!((b - 0.06).abs() < 1e-15 && (s[0] - 0.2).abs() < 1e-15);
        let eye = MarketCoefficients::constant(0.0, &[0.1, 0.1], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (_, s) = wealth_dynamics(&eye, 0.0, 3.0, &[0.5, -2.0]);
        assert_eq!(s, vec![1.5, -6.0]);
    }

    #[test]
    fn dual_examples() {
        let c = MarketCoefficients::constant(0.05, &[0.07, 0.09], &[vec![0.2, 0.0], vec![0.1, 0.3]]).unwrap();
        let full = ConstraintSet::Full { m: 2 };
        let (b, s) = dual_dynamics(&c, &full, 0.0, 2.0, &[0.0, 0.0]).unwrap();
        let th = c.theta(0.0);
        assert!((b + 0.1).abs() < 1e-15);
        assert!((s[0] + 2.0 * th[0]).abs() < 1e-15 && (s[1] + 2.0 * th[1]).abs() < 1e-15);

        let ball = ConstraintSet::Ball { m: 2, radius: 2.0 };
        let (b, _) = dual_dynamics(&c, &ball, 0.0, 1.0, &[3.0, 4.0]).unwrap();
        assert!((b + 0.05 + 10.0).abs() < 1e-12);

        assert_eq!(dual_dynamics(&c, &ball, 0.0, 0.0, &[1.0, 1.0]).unwrap(), (-0.0, vec![-0.0, -0.0]));
        assert!(matches!(
            dual_dynamics(&c, &full, 0.0, 1.0, &[1.0, 0.0]),
            Err(SdeError::InfiniteSupport)
        ));
    }

    #[test]
    fn presets_are_reproducible_and_well_posed() {
        let a = MarketCoefficients::example1(3, 5);
        assert_eq!(a, MarketCoefficients::example1(3, 5));
        assert_ne!(a, MarketCoefficients::example1(4, 5));
        if let VolSpec::Constant { matrix } = &a.vol {
            for (i, row) in matrix.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let lo = if i == j { 0.2 } else { 0.0 };
                    assert!(*v >= lo && *v < lo + 0.2);
                }
            }
        }
        let e3 = MarketCoefficients::example3(1, 20);
        for i in 0..=50 {
            let s = e3.sigma(i as f64 * 0.01);
            assert!((0..20).all(|j| s[(j, j)] >= 0.2 - 1e-15));
        }
        let e2 = MarketCoefficients::example2(1, 50);
        let mu = e2.mu(0.25);
        assert!(mu.iter().all(|m| (0.02..=0.06).contains(m)));
    }

    #[test]
    fn theta_solves_sigma_theta_equals_b() {
        let c = MarketCoefficients::example1(9, 5);
        let th = DVector::from_vec(c.theta(0.0));
        let back = c.sigma(0.0) * th;
        for (x, b) in back.iter().zip(c.excess(0.0)) {
            assert!((x - b).abs() < 1e-14);
        }
    }
}
