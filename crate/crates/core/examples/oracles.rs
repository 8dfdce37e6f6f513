//! Every reference value: non-HARA closed form, Merton (unconstrained and
//! cone), log-ball quadrature and the Heston Riccati solution, the latter
//! cross-checked by finite differences.

use dualctl::benchmarks::{heston_fd_value, heston_riccati_value};
use dualctl::harness::{oracle_value, preset, PRESETS};
use dualctl::sde::HestonParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in PRESETS {
        let c = preset(name, false)?;
        match oracle_value(&c)? {
            Some(o) => println!("{name:<24} {:.8}  {}", o.value, o.source),
            None => println!("{name:<24} -"),
        }
    }
    let h = HestonParams::default();
    for t in [0.2, 0.5, 1.0] {
        let r = heston_riccati_value(&h, 0.5, 1.0, h.v0, t)?;
        let fd = heston_fd_value(&h, 0.5, 1.0, h.v0, t, 4.0, 400);
        println!("Heston T = {t}: Riccati {r:.6}  finite differences {fd:.6}");
    }
    Ok(())
}
