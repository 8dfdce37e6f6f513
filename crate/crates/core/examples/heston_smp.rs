//! Deep SMP bracket on the one-stock Heston market treated as random
//! coefficients, power utility.

use dualctl::benchmarks::heston_riccati_value;
use dualctl::constraint::ConstraintSet;
use dualctl::nn::LearningSchedule;
use dualctl::sde::HestonParams;
use dualctl::smp::{RandomMarket, SmpConfig, SmpProblem, SmpSolver};
use dualctl::utility::UtilitySpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let horizon = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let eval_paths = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1 << 16);
    let params = HestonParams::default();
    let problem = SmpProblem::new(
        RandomMarket::Heston { params, stocks: 1 },
        UtilitySpec::Power { p: 0.5 },
        ConstraintSet::Full { m: 1 },
        1.0,
    );
    let config = SmpConfig {
        horizon,
        steps,
        schedule: LearningSchedule::new(iterations),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (solver, trace) = SmpSolver::train(&problem, config)?;
    for row in trace.rows.iter().step_by((iterations / 10).max(1)) {
        println!("{:6} Ly {:.6} LQ {:.3e} y {:.6}", row.iteration, row.loss_y, row.loss_q, row.y);
    }
    let b = solver.monte_carlo_bounds(&problem, eval_paths, 12345)?;
    let truth = heston_riccati_value(&params, 0.5, 1.0, params.v0, horizon)?;
    println!(
        "u_low {:.6} +- {:.1e}  u_high {:.6} +- {:.1e}  truth {:.6}  width {:.3e}  ({:.1}s)",
        b.u_low,
        b.se_low,
        b.u_high,
        b.se_high,
        truth,
        b.width() / truth,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
