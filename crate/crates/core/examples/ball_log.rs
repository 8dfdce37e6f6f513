//! Log utility with the control confined to a ball (Example 3), primal
//! enforced by a quadratic penalty.

use dualctl::benchmarks::log_ball_solution;
use dualctl::harness::{preset, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mut c = preset("example3-ball-log", false)?;
    c.iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    c.warm_start = true;
    let market = c.market.coefficients(c.seeds.coefficient)?.expect("deterministic market");
    for radius in [0.1, 0.5, 1.0, 5.0] {
        let s = log_ball_solution(&market, radius, c.x0, c.horizon, c.quadrature_intervals)?;
        println!("R = {radius:<4} value {:.8}", s.value);
    }
    let rec = run_experiment(&c, None)?;
    for v in &rec.values {
        println!("{:<7} {:.8} rel err {:+.3}%", v.label, v.value, 100.0 * v.rel_err.unwrap_or(f64::NAN));
    }
    Ok(())
}
