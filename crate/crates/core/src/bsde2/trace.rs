use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bsde2Config, Bsde2Error, ControlProblem, Solver2Bsde};
use crate::nn::{read_binary, write_binary, NetworkRecord, NnError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l1: f64,
    /// `sum_i sum_theta |dL2_i/dtheta|`, or `|dL3/dy0|` when the control is
    /// not trained.
    pub control_grad_norm: f64,
    pub l3: Option<f64>,
    pub v0: f64,
    pub seconds: f64,
}

/// One row per training iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,l1,control_grad_norm,l3,v0,seconds")?;
        for r in &self.rows {
            let l3 = r.l3.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{}", r.iteration, r.l1, r.control_grad_norm, l3, r.v0, r.seconds)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, Bsde2Error> {
        let mut text = String::new();
        BufReader::new(r).read_to_string(&mut text)?;
        let bad = |line: usize| Bsde2Error::Config(format!("malformed trace line {line}"));
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
            rows.push(TraceRow {
                iteration: f[0].parse().map_err(|_| bad(i + 1))?,
                l1: num(f[1])?,
                control_grad_norm: num(f[2])?,
                l3: if f[3].is_empty() { None } else { Some(num(f[3])?) },
                v0: num(f[4])?,
                seconds: num(f[5])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Stored solver parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverCheckpoint {
    pub problem: String,
    pub config: Bsde2Config,
    pub iterations: usize,
    pub v0: f64,
    pub z0: Vec<f64>,
    pub y0: Option<f64>,
    pub gamma_nets: Vec<NetworkRecord>,
    pub control_nets: Vec<NetworkRecord>,
}

impl SolverCheckpoint {
    pub fn capture<P: ControlProblem + ?Sized>(problem: &P, solver: &Solver2Bsde) -> Self {
        Self {
            problem: problem.name(),
            config: solver.config.clone(),
            iterations: solver.iterations_done(),
            v0: solver.v0,
            z0: solver.z0.clone(),
            y0: solver.y0,
            gamma_nets: solver.gamma_nets.iter().map(NetworkRecord::from).collect(),
            control_nets: solver.control_nets.iter().map(NetworkRecord::from).collect(),
        }
    }

    pub fn restore<P: ControlProblem + ?Sized>(self, problem: &P) -> Result<Solver2Bsde, Bsde2Error> {
        let nets = |v: Vec<NetworkRecord>| v.into_iter().map(NetworkRecord::into_network).collect::<Result<Vec<_>, _>>();
        let gamma = nets(self.gamma_nets)?;
        let control = nets(self.control_nets)?;
        let mut s = Solver2Bsde::from_parts(problem, self.config, self.v0, self.z0, self.y0, gamma, control)?;
        s.set_iterations_done(self.iterations);
        Ok(s)
    }

    /// Magic `SOL1`, little-endian `u64` counts `[d, N, has_y0]`, `f64`
    /// values `v0, z0.., y0`, then every Gamma network and every control
    /// network in network binary form.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), Bsde2Error> {
        w.write_all(b"SOL1")?;
        for v in [self.z0.len(), self.gamma_nets.len(), usize::from(self.y0.is_some())] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.v0.to_le_bytes())?;
        for z in &self.z0 {
            w.write_all(&z.to_le_bytes())?;
        }
        if let Some(y) = self.y0 {
            w.write_all(&y.to_le_bytes())?;
        }
        for rec in self.gamma_nets.iter().chain(&self.control_nets) {
            write_binary(&rec.clone().into_network()?, &mut w)?;
        }
        Ok(())
    }

    /// Network parameters and scalars from [`SolverCheckpoint::write_binary`];
    /// the remaining fields are taken from `meta`.
    pub fn read_binary<R: Read>(mut r: R, meta: &SolverCheckpoint) -> Result<Self, Bsde2Error> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SOL1" {
            return Err(NnError::Checkpoint("not a solver checkpoint".into()).into());
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64, Bsde2Error> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let d = next_u64(&mut r)? as usize;
        let steps = next_u64(&mut r)? as usize;
        let has_y0 = next_u64(&mut r)? == 1;
        let next_f64 = |r: &mut R| -> Result<f64, Bsde2Error> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let v0 = next_f64(&mut r)?;
        let z0 = (0..d).map(|_| next_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let y0 = if has_y0 { Some(next_f64(&mut r)?) } else { None };
        let mut read_nets = |count: usize| -> Result<Vec<NetworkRecord>, Bsde2Error> {
            (0..count)
                .map(|_| Ok(NetworkRecord::from(&read_binary(&mut r)?)))
                .collect()
        };
        let gamma_nets = read_nets(steps)?;
        let control_nets = read_nets(steps)?;
        Ok(Self {
            v0,
            z0,
            y0,
            gamma_nets,
            control_nets,
            ..meta.clone()
        })
    }
}

/// Writes `solver.json` and `solver.bin` into `dir`.
pub fn write_checkpoint<P: ControlProblem + ?Sized>(
    dir: &Path,
    problem: &P,
    solver: &Solver2Bsde,
) -> Result<SolverCheckpoint, Bsde2Error> {
    std::fs::create_dir_all(dir)?;
    let ckpt = SolverCheckpoint::capture(problem, solver);
    serde_json::to_writer(BufWriter::new(File::create(dir.join("solver.json"))?), &ckpt)?;
    let mut w = BufWriter::new(File::create(dir.join("solver.bin"))?);
    ckpt.write_binary(&mut w)?;
    w.flush()?;
    Ok(ckpt)
}

/// Reads `solver.json` from `dir`.
pub fn read_checkpoint(dir: &Path) -> Result<SolverCheckpoint, Bsde2Error> {
    let f = BufReader::new(File::open(dir.join("solver.json"))?);
    Ok(serde_json::from_reader(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde2::{Enforcement, UtilityDual, UtilityPrimal};
    use crate::constraint::ConstraintSet;
    use crate::nn::LearningSchedule;
    use crate::sde::MarketCoefficients;
    use crate::utility::UtilitySpec;

    fn config() -> Bsde2Config {
        Bsde2Config {
            steps: 3,
            batch: 8,
            schedule: LearningSchedule::new(2),
            ..Default::default()
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = TrainingTrace {
            rows: vec![
                TraceRow {
                    iteration: 0,
                    l1: 0.25,
                    control_grad_norm: 1.5,
                    l3: None,
                    v0: 0.1,
                    seconds: 0.01,
                },
                TraceRow {
                    iteration: 1,
                    l1: 1e-7,
                    control_grad_norm: 0.0,
                    l3: Some(-1.25),
                    v0: 2.0,
                    seconds: 0.02,
                },
            ],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("iteration,l1,control_grad_norm,l3,v0,seconds\n"));
        assert_eq!(TrainingTrace::read_csv(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn checkpoint_round_trips() {
        let market = MarketCoefficients::example1(1, 2);
        let p = UtilityPrimal {
            market: market.clone(),
            utility: UtilitySpec::Log,
            constraint: ConstraintSet::Full { m: 2 },
            enforcement: Enforcement::default(),
            x0: 1.0,
        };
        let d = UtilityDual {
            market,
            utility: UtilitySpec::Log,
            constraint: ConstraintSet::Ball { m: 2, radius: 1.0 },
            rule: Default::default(),
            x0: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = Solver2Bsde::train(&p, config()).unwrap();
        let ck = write_checkpoint(dir.path(), &p, &s).unwrap();
        let back = read_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ck);
        let bin = SolverCheckpoint::read_binary(File::open(dir.path().join("solver.bin")).unwrap(), &back).unwrap();
        assert_eq!(bin, ck);
        let restored = back.restore(&p).unwrap();
        assert_eq!(restored.v0, s.v0);
        assert_eq!(restored.control_nets, s.control_nets);
        assert_eq!(restored.iterations_done(), s.iterations_done());

        let (sd, _) = Solver2Bsde::train(&d, config()).unwrap();
        let ck = SolverCheckpoint::capture(&d, &sd);
        let mut buf = Vec::new();
        ck.write_binary(&mut buf).unwrap();
        assert_eq!(SolverCheckpoint::read_binary(buf.as_slice(), &ck).unwrap(), ck);
        assert!(ck.y0.is_some());
    }
}
