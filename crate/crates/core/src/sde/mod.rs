//! Market models and Euler–Maruyama path simulation.

mod heston;
mod market;
mod pathdep;

pub use heston::{heston_dynamics, simulate_variance, HestonParams, HestonSide};
pub use market::{dual_dynamics, wealth_dynamics, DriftSpec, MarketCoefficients, VolSpec};
pub use pathdep::{pathdep_sigma, simulate_stocks, PathDepVolParams, StockPaths};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("infinite support value: dual control is inadmissible")]
    InfiniteSupport,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform grid `t_0 = 0 < t_1 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self, SdeError> {
        if steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SdeError::InvalidParams(format!(
                "need N >= 1 and T > 0, got N={steps}, T={horizon}"
            )));
        }
        let times = (0..=steps)
            .map(|i| {
                if i == steps {
                    horizon
                } else {
                    horizon * i as f64 / steps as f64
                }
            })
            .collect();
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the generator owning increment `(path, step)` of stream `seed`.
pub fn stream_key(seed: u64, path: u64, step: u64) -> u64 {
    splitmix64(seed ^ splitmix64(path.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ splitmix64(step)))
}

/// Fills `out` with the standard normals keyed by `(seed, path, step)`.
pub fn keyed_normals(seed: u64, path: u64, step: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, path, step));
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// Unscaled Gaussian increments `dW_i`, one `k x dim` tensor per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    steps: Vec<Tensor>,
    dim: usize,
    paths: usize,
}

impl Increments {
    /// With `antithetic`, path `2j+1` carries the negated draws of path `2j`.
    pub fn sample(seed: u64, paths: usize, steps: usize, dim: usize, antithetic: bool) -> Self {
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut t = Tensor::zeros(paths, dim);
            for p in 0..paths {
                if antithetic && p % 2 == 1 {
                    let (prev, cur) = t.data_mut().split_at_mut(p * dim);
                    for (c, a) in cur[..dim].iter_mut().zip(&prev[(p - 1) * dim..]) {
                        *c = -*a;
                    }
                } else {
                    let key_path = if antithetic { (p / 2) as u64 } else { p as u64 };
                    keyed_normals(seed, key_path, step as u64, t.row_mut(p));
                }
            }
            out.push(t);
        }
        Self {
            steps: out,
            dim,
            paths,
        }
    }

    pub fn from_steps(steps: Vec<Tensor>) -> Result<Self, SdeError> {
        let (paths, dim) = steps.first().map(Tensor::shape).unwrap_or((0, 0));
        if steps.iter().any(|s| s.shape() != (paths, dim)) {
            return Err(SdeError::Shape("increment steps differ in shape".into()));
        }
        Ok(Self { steps, dim, paths })
    }

    pub fn step(&self, i: usize) -> &Tensor {
        &self.steps[i]
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Columns `start..end` of every step.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        Self {
            steps: self.steps.iter().map(|s| s.select_cols(&idx)).collect(),
            dim: end - start,
            paths: self.paths,
        }
    }
}

/// `state + dt * drift + sqrt(dt) * diffusion * dW`, row by row.
///
/// `diffusion` holds each row's `d x n` matrix flattened row-major.
pub fn euler_step(
    state: &Tensor,
    drift: &Tensor,
    diffusion: &Tensor,
    dt: f64,
    dw: &Tensor,
) -> Result<Tensor, SdeError> {
    let (k, d) = state.shape();
    let n = dw.cols();
    if drift.shape() != (k, d) || diffusion.shape() != (k, d * n) || dw.rows() != k {
        return Err(SdeError::Shape(format!(
            "state {:?}, drift {:?}, diffusion {:?}, dW {:?}",
            state.shape(),
            drift.shape(),
            diffusion.shape(),
            dw.shape()
        )));
    }
    let sq = dt.sqrt();
    let mut out = state.clone();
    for r in 0..k {
        let w = dw.row(r);
        let s = diffusion.row(r);
        let b = drift.row(r);
        for (j, x) in out.row_mut(r).iter_mut().enumerate() {
            let noise: f64 = s[j * n..(j + 1) * n].iter().zip(w).map(|(a, b)| a * b).sum();
            *x += dt * b[j] + sq * noise;
        }
    }
    Ok(out)
}

/// Euler step with coordinates in `geometric` advanced in log space:
/// `x_j <- x_j exp((b_j/x_j - |s_j/x_j|^2/2) dt + sqrt(dt) (s_j/x_j) dW)`.
/// Geometric coordinates must be positive.
pub fn log_euler_step(
    state: &Tensor,
    drift: &Tensor,
    diffusion: &Tensor,
    dt: f64,
    dw: &Tensor,
    geometric: &[usize],
) -> Result<Tensor, SdeError> {
    let mut out = euler_step(state, drift, diffusion, dt, dw)?;
    let k = state.rows();
    let n = dw.cols();
    let sq = dt.sqrt();
    for r in 0..k {
        let w = dw.row(r);
        for &j in geometric {
            let x = state.get(r, j);
            let s = &diffusion.row(r)[j * n..(j + 1) * n];
            let vol2: f64 = s.iter().map(|a| (a / x).powi(2)).sum();
            let noise: f64 = s.iter().zip(w).map(|(a, b)| a / x * b).sum();
            let growth = (drift.get(r, j) / x - 0.5 * vol2) * dt + sq * noise;
            out.set(r, j, x * growth.exp());
        }
    }
    Ok(out)
}

/// Writes one CSV row per (path, step): `path,t,x0,x1,...`.
pub fn write_paths_csv<W: Write>(grid: &TimeGrid, states: &[Tensor], mut w: W) -> Result<(), SdeError> {
    let d = states.first().map(Tensor::cols).unwrap_or(0);
    let k = states.first().map(Tensor::rows).unwrap_or(0);
    if states.len() != grid.steps() + 1 || states.iter().any(|s| s.shape() != (k, d)) {
        return Err(SdeError::Shape("one k x d state tensor per grid point expected".into()));
    }
    write!(w, "path,t")?;
    for j in 0..d {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    for p in 0..k {
        for (i, s) in states.iter().enumerate() {
            write!(w, "{p},{}", grid.t(i))?;
            for v in s.row(p) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Mean and standard error, over antithetic pair means when `paired`.
pub fn mean_se(values: &[f64], paired: bool) -> (f64, f64) {
    let samples: Vec<f64> = if paired {
        values.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    } else {
        values.to_vec()
    };
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
