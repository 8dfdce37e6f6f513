//! Power utility with a no-short-selling cone on the 50-stock Example 2
//! market: dual quadrature reference and short primal/dual runs.

use dualctl::harness::{oracle_value, preset, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mut c = preset("example2-cone-merton", false)?;
    c.iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    c.warm_start = true;
    if let Some(m) = args.get(2).and_then(|s| s.parse().ok()) {
        c.market = c.market.with_dim(m)?;
    }
    let oracle = oracle_value(&c)?.expect("cone Merton has a reference");
    println!("m = {}  reference {:.8} ({})", c.market.dim(), oracle.value, oracle.source);
    let rec = run_experiment(&c, None)?;
    for v in &rec.values {
        println!("{:<7} {:.8} +- {:.1e}  rel err {:+.3}%", v.label, v.value, v.se, 100.0 * v.rel_err.unwrap_or(f64::NAN));
    }
    Ok(())
}
