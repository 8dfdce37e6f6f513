//! Primal 2BSDE on the one-stock Heston market with power utility.

use dualctl::bsde2::{Bsde2Config, Enforcement, HestonPrimal, Solver2Bsde};
use dualctl::constraint::ConstraintSet;
use dualctl::nn::LearningSchedule;
use dualctl::sde::HestonParams;
use dualctl::utility::UtilitySpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let horizon = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let problem = HestonPrimal {
        params: HestonParams::default(),
        utility: UtilitySpec::Power { p: 0.5 },
        stocks: 1,
        constraint: ConstraintSet::Full { m: 1 },
        enforcement: Enforcement::default(),
        x0: 1.0,
    };
    let config = Bsde2Config {
        horizon,
        steps,
        schedule: LearningSchedule::new(iterations),
        warm_start: args.get(4).is_some_and(|s| s == "warm"),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (solver, trace) = Solver2Bsde::train(&problem, config)?;
    for row in trace.rows.iter().step_by((iterations / 10).max(1)) {
        println!("{:6} L1 {:.3e} grad {:.3e} v0 {:.6}", row.iteration, row.l1, row.control_grad_norm, row.v0);
    }
    let mc = solver.evaluate(&problem, 1 << 14, 99)?;
    println!(
        "v0 {:.6}  mc {:.6} +- {:.1e}  cv {:.6} +- {:.1e}  ({:.1}s)",
        solver.value_at_zero(&problem),
        mc.mean,
        mc.se,
        mc.mean_cv,
        mc.se_cv,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
