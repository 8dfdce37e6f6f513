//! Deep SMP value bracket for a market whose volatility switches on the
//! running maximum of the stock.

use dualctl::harness::{preset, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mut c = preset("pathdep-power", false)?;
    c.iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    c.steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(c.steps);
    let out = std::env::temp_dir().join("dualctl-pathdep");
    let rec = run_experiment(&c, Some(&out))?;
    let b = rec.bracket.expect("smp run");
    println!(
        "u_low {:.6} +- {:.1e}  u_high {:.6} +- {:.1e}  width {:.2e}  excluded {}/{}",
        b.u_low, b.se_low, b.u_high, b.se_high, b.width(), b.excluded_low, b.excluded_high
    );
    println!("sample paths of (Y, P2) in {}", out.join("paths").display());
    Ok(())
}
