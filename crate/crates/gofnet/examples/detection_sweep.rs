//! Power sweep: how the fit probability reacts as residual heterogeneity
//! grows.
//!
//! ```sh
//! cargo run --release --example detection_sweep
//! ```

use gofnet::simulate::{run_sweep, SweepConfig};
use gofnet::vbem::{FitOptions, Hyperparameters};

fn main() -> anyhow::Result<()> {
    let sweep = SweepConfig {
        n_values: vec![80],
        rho_values: vec![0.1],
        lambda_values: vec![1.0, 1.5, 2.0, 2.5],
        beta: vec![],
        replicates: 5,
        seed: 17,
    };
    let hyper = Hyperparameters::with_k_max(6);
    let records = run_sweep(&sweep, &hyper, &FitOptions::default())?;

    println!("{:>8}  {:>12}  {:>12}", "lambda", "mean p(H0|Y)", "rejections");
    for &lambda in &sweep.lambda_values {
        let ps: Vec<f64> = records
            .iter()
            .filter(|r| r.lambda == lambda)
            .filter_map(|r| r.p_h0)
            .collect();
        let mean = ps.iter().sum::<f64>() / ps.len() as f64;
        let rejections = ps.iter().filter(|&&p| p < 0.5).count();
        println!("{lambda:>8.2}  {mean:>12.4}  {rejections:>9}/{}", ps.len());
    }
    Ok(())
}
