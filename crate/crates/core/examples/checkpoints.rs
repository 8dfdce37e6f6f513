//! Train briefly, write a checkpoint (JSON metadata plus little-endian f64
//! weights), restore it and continue from the same state.

use dualctl::bsde2::{read_checkpoint, write_checkpoint, Bsde2Config, Enforcement, Solver2Bsde, UtilityPrimal};
use dualctl::constraint::ConstraintSet;
use dualctl::nn::LearningSchedule;
use dualctl::sde::MarketCoefficients;
use dualctl::utility::UtilitySpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = UtilityPrimal {
        market: MarketCoefficients::example1(1, 3),
        utility: UtilitySpec::Power { p: 0.5 },
        constraint: ConstraintSet::Full { m: 3 },
        enforcement: Enforcement::default(),
        x0: 1.0,
    };
    let config = Bsde2Config {
        horizon: 0.5,
        steps: 10,
        schedule: LearningSchedule::new(400),
        warm_start: true,
        ..Default::default()
    };
    let (solver, trace) = Solver2Bsde::train(&problem, config)?;
    let dir = std::env::temp_dir().join("dualctl-checkpoint");
    write_checkpoint(&dir, &problem, &solver)?;
    let restored = read_checkpoint(&dir)?.restore(&problem)?;
    println!("wrote {} ({} BSDE parameters)", dir.display(), solver.bsde_param_count());
    println!(
        "v0 before {:.8} after restore {:.8}, {} iterations done, last L1 {:.2e}",
        solver.value_at_zero(&problem),
        restored.value_at_zero(&problem),
        restored.iterations_done(),
        trace.last().map_or(f64::NAN, |r| r.l1)
    );
    Ok(())
}
