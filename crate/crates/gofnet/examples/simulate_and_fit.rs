//! Simulate a network from the generator and fit all block counts.
//!
//! ```sh
//! cargo run --release --example simulate_and_fit
//! ```

use std::collections::BTreeMap;

use gofnet::model_select::fit_result;
use gofnet::simulate::{simulate_network, SimConfig};
use gofnet::vbem::{fit_model, FitOptions, Hyperparameters};

fn main() -> anyhow::Result<()> {
    // lambda > 1 adds blockwise residual heterogeneity on top of the
    // covariate effect
    let sim = simulate_network(&SimConfig {
        n: 80,
        rho: 0.1,
        lambda: 2.0,
        beta: vec![0.5],
        seed: 42,
    })?;
    println!(
        "simulated n = {} nodes, density {:.3}",
        sim.network.n(),
        sim.network.density()
    );

    let hyper = Hyperparameters::with_k_max(5);
    let opts = FitOptions::default();
    let output = fit_model(&sim.network, &hyper, &opts)?;

    let bounds: BTreeMap<usize, f64> = output.fits.iter().map(|f| (f.k, f.bound)).collect();
    let result = fit_result(&bounds, &hyper.model_prior)?;

    println!("\n{:>4}  {:>14}  {:>10}", "K", "lower bound", "posterior");
    for (k, bound) in &result.bounds {
        println!(
            "{k:>4}  {bound:>14.2}  {:>10.4}",
            result.posterior.get(k).copied().unwrap_or(0.0)
        );
    }
    println!("\np(H0 | Y) = {:.4}", result.p_h0);
    Ok(())
}
