use super::{ConstraintSpec, ExperimentConfig, HarnessError, MarketSpec, SolverKind};
use crate::bsde2::Enforcement;
use crate::constraint::PenaltyConfig;
use crate::nn::{Activation, OptimizerKind};
use crate::sde::{HestonParams, PathDepVolParams};
use crate::utility::UtilitySpec;

/// Preset names accepted by [`preset`].
pub const PRESETS: [&str; 13] = [
    "example1-nonhara",
    "example2-cone-merton",
    "example3-ball-log",
    "heston-power",
    "heston-smp",
    "heston-nonhara-10stock",
    "pathdep-power",
    "heston-steps",
    "testbed-steps",
    "testbed-horizons",
    "testbed-activations",
    "testbed-optimizers",
    "testbed-dimensions",
];

fn heston(stocks: usize) -> MarketSpec {
    MarketSpec::Heston {
        params: HestonParams::default(),
        stocks,
    }
}

/// Unconstrained power utility, Example 1 coefficients with `m = 10`, `T = 1`.
fn testbed(name: &str, iterations: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(name, MarketSpec::Example1 { m: 10 }, UtilitySpec::Power { p: 0.5 });
    c.horizon = 1.0;
    c.steps = 20;
    c.iterations = iterations;
    c.warm_start = true;
    c
}

/// Configuration of a named experiment. `full` selects the published
/// iteration budget, otherwise a desk-scale budget is used.
pub fn preset(name: &str, full: bool) -> Result<ExperimentConfig, HarnessError> {
    let budget = |desk: usize, paper: usize| if full { paper } else { desk };
    let power = UtilitySpec::Power { p: 0.5 };
    let mut c = match name {
        "example1-nonhara" => {
            let mut c = ExperimentConfig::new(name, MarketSpec::Example1 { m: 5 }, UtilitySpec::NonHara);
            c.solver = SolverKind::BothBsde;
            c.horizon = 0.5;
            c.steps = 20;
            c.iterations = budget(4000, 10000);
            c.tolerance = Some(5e-3);
            c
        }
        "example2-cone-merton" => {
            let mut c = ExperimentConfig::new(name, MarketSpec::Example2 { m: 50 }, power);
            c.constraint = ConstraintSpec::Cone;
            c.solver = SolverKind::BothBsde;
            c.horizon = 0.5;
            c.steps = 10;
            c.warm_start = true;
            c.iterations = budget(1000, 100_000);
            c.tolerance = full.then_some(5e-3);
            c
        }
        "example3-ball-log" => {
            let mut c = ExperimentConfig::new(name, MarketSpec::Example3 { m: 20 }, UtilitySpec::Log);
            c.constraint = ConstraintSpec::Ball { radius: 1.0 };
            c.enforcement = Enforcement::Soft {
                penalty: PenaltyConfig { weight: 1000.0 },
            };
            c.solver = SolverKind::BothBsde;
            c.x0 = 5.0;
            c.horizon = 0.5;
            c.steps = 10;
            c.iterations = budget(2000, 10000);
            c.tolerance = Some(1e-2);
            c
        }
        "heston-power" => {
            let mut c = ExperimentConfig::new(name, heston(1), power);
            c.solver = SolverKind::BothBsde;
            c.horizon = 0.2;
            c.steps = 5;
            c.warm_start = true;
            c.iterations = budget(5000, 10000);
            c.tolerance = Some(3e-3);
            c
        }
        "heston-smp" => {
            let mut c = ExperimentConfig::new(name, heston(1), power);
            c.solver = SolverKind::Smp;
            c.horizon = 0.2;
            c.steps = 10;
            c.iterations = budget(4000, 5000);
            c.eval_paths = 1 << 18;
            c.tolerance = Some(1e-3);
            c
        }
        "heston-nonhara-10stock" => {
            let mut c = ExperimentConfig::new(name, heston(10), UtilitySpec::NonHara);
            c.solver = SolverKind::All;
            c.horizon = 0.2;
            c.steps = budget(5, 20);
            c.warm_start = true;
            c.iterations = budget(1500, 10000);
            c.schedule.bsde_rate = 3e-3;
            c.schedule.control_rate = 3e-4;
            c.divergence_threshold = 1e12;
            c
        }
        "pathdep-power" => {
            let mut c = ExperimentConfig::new(
                name,
                MarketSpec::PathDependent {
                    params: PathDepVolParams::default(),
                },
                power,
            );
            c.constraint = ConstraintSpec::Cone;
            c.solver = SolverKind::Smp;
            c.horizon = 0.5;
            c.steps = 10;
            c.iterations = budget(2000, 10000);
            c.eval_paths = 1 << 16;
            c.tolerance = Some(1e-2);
            c
        }
        "heston-steps" => {
            let mut c = ExperimentConfig::new(name, heston(1), power);
            c.horizon = 0.5;
            c.warm_start = true;
            c.iterations = budget(3000, 10000);
            c.sweep.steps = vec![5, 10, 20];
            c
        }
        "testbed-steps" => {
            let mut c = testbed(name, budget(2000, 10000));
            c.sweep.steps = vec![5, 10, 20];
            c
        }
        "testbed-horizons" => {
            let mut c = testbed(name, budget(2000, 10000));
            c.steps = 10;
            c.sweep.horizons = vec![0.2, 0.4, 0.6, 0.8, 1.0];
            c
        }
        "testbed-activations" => {
            let mut c = testbed(name, budget(2000, 10000));
            c.sweep.activations = Activation::ALL.to_vec();
            c
        }
        "testbed-optimizers" => {
            let mut c = testbed(name, budget(2000, 10000));
            c.sweep.optimizers = OptimizerKind::ALL.to_vec();
            c
        }
        "testbed-dimensions" => {
            let mut c = testbed(name, budget(2000, 10000));
            c.sweep.dimensions = vec![1, 5, 10];
            c.sweep.steps = if full { vec![10, 20, 30, 40, 50] } else { vec![10, 20] };
            c
        }
        other => return Err(HarnessError::UnknownPreset(other.into())),
    };
    c.resolve();
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::oracle_value;

    #[test]
    fn every_preset_is_valid() {
        for name in PRESETS {
            for full in [false, true] {
                let c = preset(name, full).unwrap();
                assert_eq!(c.name, name);
            }
        }
        assert!(matches!(preset("nope", false), Err(HarnessError::UnknownPreset(_))));
    }

    #[test]
    fn example1_parameter_block() {
        let c = preset("example1-nonhara", false).unwrap();
        assert_eq!((c.horizon, c.x0, c.market.dim()), (0.5, 1.0, 5));
        let m = c.market.coefficients(c.seeds.coefficient).unwrap().unwrap();
        assert_eq!(m.r(0.0), 0.05);
        assert_eq!(m.mu(0.3), vec![0.06; 5]);
        assert_eq!(preset("example1-nonhara", true).unwrap().iterations, 10000);
    }

    #[test]
    fn presets_with_oracles() {
        for (name, has) in [
            ("example1-nonhara", true),
            ("example2-cone-merton", true),
            ("example3-ball-log", true),
            ("heston-power", true),
            ("heston-smp", true),
            ("heston-nonhara-10stock", false),
            ("pathdep-power", false),
        ] {
            assert_eq!(oracle_value(&preset(name, false).unwrap()).unwrap().is_some(), has, "{name}");
        }
    }
}
