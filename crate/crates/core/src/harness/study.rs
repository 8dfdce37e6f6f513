use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_experiment, ExperimentConfig, HarnessError, ResultRecord, SweepAxes};
use crate::nn::{Activation, OptimizerKind};

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// One config per point of the cartesian product of the non-empty axes.
pub fn expand_sweep(config: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let axes = &config.sweep;
    if axes.is_empty() {
        return Err(HarnessError::Config("sweep mode needs at least one non-empty axis".into()));
    }
    let mut base = config.clone();
    base.sweep = SweepAxes::default();
    let mut points = vec![base];
    fn grow<T: Copy>(
        points: Vec<ExperimentConfig>,
        axis: &[T],
        apply: impl Fn(&mut ExperimentConfig, T) -> Result<String, HarnessError>,
    ) -> Result<Vec<ExperimentConfig>, HarnessError> {
        if axis.is_empty() {
            return Ok(points);
        }
        let mut out = Vec::with_capacity(points.len() * axis.len());
        for p in points {
            for &a in axis {
                let mut c = p.clone();
                let suffix = apply(&mut c, a)?;
                c.name = format!("{}-{suffix}", c.name);
                out.push(c);
            }
        }
        Ok(out)
    }
    points = grow(points, &axes.dimensions, |c, m| {
        c.market = c.market.with_dim(m)?;
        Ok(format!("m{m}"))
    })?;
    points = grow(points, &axes.horizons, |c, t| {
        c.horizon = t;
        Ok(format!("T{t}"))
    })?;
    points = grow(points, &axes.steps, |c, n| {
        c.steps = n;
        Ok(format!("N{n}"))
    })?;
    points = grow(points, &axes.activations, |c, a: Activation| {
        c.activation = a;
        Ok(serde_json::to_value(a)?.as_str().unwrap_or("activation").to_string())
    })?;
    points = grow(points, &axes.optimizers, |c, o: OptimizerKind| {
        c.optimizer = o;
        Ok(serde_json::to_value(o)?.as_str().unwrap_or("optimizer").to_string())
    })?;
    for p in &points {
        p.validate()?;
    }
    Ok(points)
}

/// Runs every sweep point, `config.parallelism` at a time, in order.
pub fn run_sweep(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ResultRecord>, HarnessError> {
    let points = expand_sweep(config)?;
    let workers = config.parallelism.min(points.len()).max(1);
    let mut results: Vec<Option<Result<ResultRecord, HarnessError>>> = (0..points.len()).map(|_| None).collect();
    for (chunk_points, chunk_results) in points.chunks(workers).zip(results.chunks_mut(workers)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_points
                .iter()
                .map(|p| s.spawn(move || run_experiment(p, out)))
                .collect();
            for (h, slot) in handles.into_iter().zip(chunk_results.iter_mut()) {
                *slot = Some(h.join().expect("sweep worker panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every point ran")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvergenceAxis {
    Steps,
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub x: f64,
    /// Absolute relative error of the first value of the record.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub axis: ConvergenceAxis,
    pub points: Vec<ConvergencePoint>,
    pub slope: Option<f64>,
    pub records: Vec<ResultRecord>,
}

impl ConvergenceStudy {
    /// Fits the slope over already computed records.
    pub fn from_records(axis: ConvergenceAxis, records: Vec<ResultRecord>) -> Result<Self, HarnessError> {
        let mut points = Vec::with_capacity(records.len());
        for r in &records {
            let err = r
                .values
                .first()
                .and_then(|v| v.rel_err)
                .ok_or_else(|| HarnessError::Config(format!("{} has no oracle to measure error against", r.config.name)))?;
            let x = match axis {
                ConvergenceAxis::Steps => r.config.steps as f64,
                ConvergenceAxis::Horizon => r.config.horizon,
            };
            points.push(ConvergencePoint { x, error: err.abs() });
        }
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.error).collect();
        Ok(Self {
            axis,
            slope: loglog_slope(&xs, &ys),
            points,
            records,
        })
    }
}

/// Error against the oracle along the `steps` or `horizons` axis (at least
/// three points) and its log-log slope.
pub fn convergence_study(config: &ExperimentConfig, out: Option<&Path>) -> Result<ConvergenceStudy, HarnessError> {
    let s = &config.sweep;
    let axis = match (s.steps.len(), s.horizons.len()) {
        (n, 0) if n >= 3 => ConvergenceAxis::Steps,
        (0, n) if n >= 3 => ConvergenceAxis::Horizon,
        _ => {
            return Err(HarnessError::Config(
                "a convergence study needs exactly one of the steps or horizons axes with at least 3 points".into(),
            ))
        }
    };
    if !(s.activations.is_empty() && s.optimizers.is_empty() && s.dimensions.is_empty()) {
        return Err(HarnessError::Config("a convergence study sweeps a single axis".into()));
    }
    if super::oracle_value(config)?.is_none() {
        return Err(HarnessError::Config(format!("{} has no registered oracle", config.name)));
    }
    ConvergenceStudy::from_records(axis, run_sweep(config, out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodologyRow {
    pub variant: String,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub rel_err: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodologyTable {
    pub rows: Vec<MethodologyRow>,
    pub records: Vec<ResultRecord>,
}

impl MethodologyTable {
    pub fn from_records(records: Vec<ResultRecord>) -> Self {
        let rows = records
            .iter()
            .map(|r| MethodologyRow {
                variant: r.config.name.clone(),
                activation: r.config.activation,
                optimizer: r.config.optimizer,
                rel_err: r.values.first().and_then(|v| v.rel_err),
                seconds: r.seconds,
            })
            .collect();
        Self { rows, records }
    }

    /// Row with the smallest absolute relative error.
    pub fn best(&self) -> Option<&MethodologyRow> {
        self.rows
            .iter()
            .filter(|r| r.rel_err.is_some())
            .min_by(|a, b| a.rel_err.unwrap().abs().total_cmp(&b.rel_err.unwrap().abs()))
    }

    pub fn row(&self, activation: Activation, optimizer: OptimizerKind) -> Option<&MethodologyRow> {
        self.rows.iter().find(|r| r.activation == activation && r.optimizer == optimizer)
    }
}

/// Relative error and runtime per activation/optimizer variant.
pub fn methodology_sweep(config: &ExperimentConfig, out: Option<&Path>) -> Result<MethodologyTable, HarnessError> {
    let s = &config.sweep;
    if s.activations.is_empty() && s.optimizers.is_empty() {
        return Err(HarnessError::Config("a methodology sweep needs activations or optimizers".into()));
    }
    Ok(MethodologyTable::from_records(run_sweep(config, out)?))
}

/// Files written by [`emit_results`] and the failed checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmitReport {
    pub failures: Vec<String>,
}

impl EmitReport {
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failures.is_empty())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

/// Writes `results.json`, `table.csv` and the `traces/` directory.
pub fn emit_results(records: &[ResultRecord], out: &Path) -> Result<EmitReport, HarnessError> {
    std::fs::create_dir_all(out.join("traces"))?;
    let mut w = BufWriter::new(File::create(out.join("results.json"))?);
    serde_json::to_writer_pretty(&mut w, records)?;
    writeln!(w)?;
    w.flush()?;
    let mut t = BufWriter::new(File::create(out.join("table.csv"))?);
    writeln!(t, "name,solver,label,T,N,iterations,value,se,oracle,rel_err_pct,seconds")?;
    for r in records {
        let c = &r.config;
        for v in &r.values {
            writeln!(
                t,
                "{},{},{},{},{},{},{:e},{:e},{},{},{:.3}",
                c.name,
                c.solver.name(),
                v.label,
                c.horizon,
                c.steps,
                c.iterations,
                v.value,
                v.se,
                opt(r.oracle.as_ref().map(|o| o.value)),
                opt(v.rel_err.map(|e| 100.0 * e)),
                v.seconds
            )?;
        }
    }
    t.flush()?;
    let failures = records
        .iter()
        .flat_map(|r| r.failed_checks().map(|c| format!("{} ({})", c.name, c.detail)))
        .collect();
    Ok(EmitReport { failures })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, HarnessError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
