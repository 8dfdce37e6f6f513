//! Heston variance paths and log-Euler wealth under a constant fraction,
//! written as CSV.

use dualctl::sde::{log_euler_step, simulate_variance, write_paths_csv, HestonParams, Increments, TimeGrid};
use dualctl::autodiff::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = HestonParams::default();
    let grid = TimeGrid::uniform(1.0, 50)?;
    let inc = Increments::sample(4, 8, 50, 2, true);
    let var = simulate_variance(&params, &grid, &inc)?;
    let mut x = vec![Tensor::filled(8, 1, 1.0)];
    let pi = 0.4;
    for i in 0..grid.steps() {
        let v = &var[i];
        let mut drift = Tensor::zeros(8, 1);
        let mut diff = Tensor::zeros(8, 2);
        for r in 0..8 {
            let (xr, vr) = (x[i].get(r, 0), v.get(r, 0));
            drift.set(r, 0, xr * (params.rate + pi * params.a * vr));
            diff.set(r, 0, xr * pi * vr.sqrt());
        }
        x.push(log_euler_step(&x[i], &drift, &diff, grid.dt(i), inc.step(i), &[0])?);
    }
    let out = std::env::temp_dir().join("dualctl-heston-paths.csv");
    write_paths_csv(&grid, &x, std::fs::File::create(&out)?)?;
    println!("mean variance at T {:.4}", var.last().unwrap().data().iter().sum::<f64>() / 8.0);
    println!("wealth paths written to {}", out.display());
    Ok(())
}
