//! Primal and dual 2BSDE on the non-HARA Example 1 market, checked against
//! the closed form and the primal-dual relations.

use dualctl::benchmarks::{duality_relation_check, nonhara_value};
use dualctl::bsde2::{forward_sweep, Bsde2Config, Enforcement, Solver2Bsde, UtilityDual, UtilityPrimal};
use dualctl::constraint::{ConstraintSet, ProjectionRule};
use dualctl::nn::LearningSchedule;
use dualctl::sde::{Increments, MarketCoefficients};
use dualctl::utility::UtilitySpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let (m, horizon, steps) = (5, 0.5, 20);
    let market = MarketCoefficients::example1(1, m);
    let exact = nonhara_value(market.r(0.0), &market.theta(0.0), 1.0, horizon)?;

    let primal = UtilityPrimal {
        market: market.clone(),
        utility: UtilitySpec::NonHara,
        constraint: ConstraintSet::Full { m },
        enforcement: Enforcement::default(),
        x0: 1.0,
    };
    let dual = UtilityDual {
        market,
        utility: UtilitySpec::NonHara,
        constraint: ConstraintSet::Full { m },
        rule: ProjectionRule::Max,
        x0: 1.0,
    };
    let config = Bsde2Config {
        horizon,
        steps,
        schedule: LearningSchedule::new(iterations),
        warm_start: true,
        ..Default::default()
    };
    let (ps, _) = Solver2Bsde::train(&primal, config.clone())?;
    let (ds, _) = Solver2Bsde::train(&dual, config)?;
    let (vp, vd) = (ps.value_at_zero(&primal), ds.value_at_zero(&dual));
    println!("closed form {:.8}  y^ {:.6}", exact.value(), exact.y_hat);
    println!("primal      {vp:.8}  rel err {:.2e}", (vp - exact.value()) / exact.value());
    println!("dual        {vd:.8}  rel err {:.2e}  y0 {:.6}", (vd - exact.value()) / exact.value(), ds.y0.unwrap_or(f64::NAN));

    let inc = Increments::sample(3, 512, steps, m, true);
    let res = duality_relation_check(&forward_sweep(&primal, &ps, &inc)?, &forward_sweep(&dual, &ds, &inc)?, 1.0);
    println!(
        "pathwise residuals: X+Z2 {:.2e}  V1-(V2-Z2 Y) {:.2e}  Z1-Y {:.2e}",
        res.state, res.value, res.gradient
    );
    Ok(())
}
