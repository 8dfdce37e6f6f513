use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualctl::harness::{
    emit_results, load_config, oracle_value, preset, run_experiment, run_sweep, ConvergenceAxis, ConvergenceStudy,
    ExperimentConfig, HarnessError, MethodologyTable, ResultRecord,
};

#[derive(Parser)]
#[command(name = "dualctl", about = "Deep primal/dual solvers for constrained utility maximisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed_coefficient: Option<u64>,
    #[arg(long, global = true)]
    seed_init: Option<u64>,
    #[arg(long, global = true)]
    seed_path: Option<u64>,
    #[arg(long, global = true)]
    seed_eval: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run { config: PathBuf },
    /// Run a named preset (a sweep when the preset has sweep axes).
    Preset {
        name: String,
        /// Published iteration budget instead of the desk-scale one.
        #[arg(long)]
        full: bool,
    },
    /// Run every point of a config's sweep axes.
    Sweep { config: PathBuf },
    /// Print the oracle value of a preset.
    Oracle { name: String },
    /// List the presets.
    Presets,
}

fn seeded(c: ExperimentConfig, o: &Opts) -> ExperimentConfig {
    c.with_seeds(o.seed_coefficient, o.seed_init, o.seed_path, o.seed_eval)
}

fn print_record(r: &ResultRecord) {
    let oracle = r.oracle.as_ref().map_or("-".to_string(), |o| format!("{:.8} ({})", o.value, o.source));
    println!("{}  oracle {oracle}  {:.1}s", r.config.name, r.seconds);
    for v in &r.values {
        let err = v.rel_err.map_or(String::new(), |e| format!("  rel err {:.3e}%", 100.0 * e));
        println!("  {:<9} {:.8} +- {:.1e}{err}", v.label, v.value, v.se);
    }
}

fn sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<ResultRecord>, HarnessError> {
    let records = run_sweep(config, Some(out))?;
    records.iter().for_each(print_record);
    let s = &config.sweep;
    let axis = match (s.steps.len(), s.horizons.len()) {
        (n, 0) if n >= 3 => Some(ConvergenceAxis::Steps),
        (0, n) if n >= 3 => Some(ConvergenceAxis::Horizon),
        _ => None,
    };
    if let (Some(axis), Some(_)) = (axis, records.first().and_then(|r| r.oracle.as_ref())) {
        if s.activations.is_empty() && s.optimizers.is_empty() && s.dimensions.is_empty() {
            let study = ConvergenceStudy::from_records(axis, records.clone())?;
            println!("log-log slope of error vs {axis:?}: {:?}", study.slope);
        }
    }
    if !(s.activations.is_empty() && s.optimizers.is_empty()) {
        let table = MethodologyTable::from_records(records.clone());
        if let Some(b) = table.best() {
            println!("best variant: {}", b.variant);
        }
    }
    Ok(records)
}

fn execute(cli: Cli) -> Result<ExitCode, HarnessError> {
    let o = &cli.opts;
    let records = match cli.command {
        Command::Presets => {
            dualctl::harness::PRESETS.iter().for_each(|p| println!("{p}"));
            return Ok(ExitCode::SUCCESS);
        }
        Command::Oracle { name } => {
            let c = seeded(preset(&name, false)?, o);
            return match oracle_value(&c)? {
                Some(v) => {
                    println!("{:.10}", v.value);
                    Ok(ExitCode::SUCCESS)
                }
                None => {
                    eprintln!("{name} has no oracle");
                    Ok(ExitCode::from(2))
                }
            };
        }
        Command::Run { config } => {
            let c = seeded(load_config(&config)?, o);
            if !c.sweep.is_empty() {
                return Err(HarnessError::Config("config has sweep axes; use `dualctl sweep`".into()));
            }
            vec![run_experiment(&c, Some(&o.out))?]
        }
        Command::Sweep { config } => sweep(&seeded(load_config(&config)?, o), &o.out)?,
        Command::Preset { name, full } => {
            let c = seeded(preset(&name, full)?, o);
            if c.sweep.is_empty() {
                vec![run_experiment(&c, Some(&o.out))?]
            } else {
                sweep(&c, &o.out)?
            }
        }
    };
    if matches!(records.len(), 1) {
        print_record(&records[0]);
    }
    let report = emit_results(&records, &o.out)?;
    for f in &report.failures {
        eprintln!("FAILED: {f}");
    }
    Ok(ExitCode::from(report.exit_code() as u8))
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
