//! Error against the number of time steps or the horizon, with the fitted
//! log-log slope. Takes a preset with a single steps or horizons axis.

use dualctl::harness::{convergence_study, preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map_or("testbed-steps", String::as_str);
    let mut c = preset(name, false)?;
    if let Some(it) = args.get(2).and_then(|s| s.parse().ok()) {
        c.iterations = it;
    }
    let study = convergence_study(&c, None)?;
    for p in &study.points {
        println!("{:?} = {:<5} rel err {:.3e}", study.axis, p.x, p.error);
    }
    println!("slope {:?}", study.slope);
    Ok(())
}
