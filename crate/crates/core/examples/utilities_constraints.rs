//! Utilities with their convex duals, and the constraint sets with support
//! functions and projections.

use dualctl::constraint::{ConstraintSet, ProjectionRule};
use dualctl::utility::UtilitySpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for u in [UtilitySpec::Power { p: 0.5 }, UtilitySpec::Log, UtilitySpec::NonHara] {
        println!("{}", u.name());
        for x in [0.5, 1.0, 2.0] {
            let (v, d1, d2) = u.u_eval(x)?;
            let y = d1;
            let (dual, ddual) = u.dual_eval(y)?;
            println!(
                "  x {x}: U {v:.6} U' {d1:.6} U'' {d2:.6} | y = U'(x): U~ {dual:.6} -U~' {:.6} residual {:.1e}",
                -ddual,
                u.legendre_residual(x, y)?
            );
        }
    }
    let raw = [0.8, -1.5, 0.3];
    for k in [
        ConstraintSet::Full { m: 3 },
        ConstraintSet::Cone { m: 3 },
        ConstraintSet::Ball { m: 3, radius: 1.0 },
        ConstraintSet::Box {
            lower: vec![-0.5, -0.5, 0.0],
            upper: vec![0.5, 0.5, 1.0],
        },
    ] {
        println!(
            "{k:?}\n  support {:.4}  max-map {:?}  square-map {:?}",
            k.support(&raw),
            k.project(&raw, ProjectionRule::Max),
            k.project(&raw, ProjectionRule::Square)
        );
    }
    Ok(())
}
