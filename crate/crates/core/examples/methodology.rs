//! Activation and optimizer comparison on the unconstrained testbed.

use dualctl::harness::{methodology_sweep, preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map_or("testbed-activations", String::as_str);
    let mut c = preset(name, false)?;
    c.iterations = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    c.steps = 10;
    let table = methodology_sweep(&c, None)?;
    for r in &table.rows {
        println!("{:<32} rel err {:.3e}  {:.1}s", r.variant, r.rel_err.unwrap_or(f64::NAN).abs(), r.seconds);
    }
    if let Some(b) = table.best() {
        println!("best: {}", b.variant);
    }
    Ok(())
}
