//! Shared helpers for the integration tests: an exact marginal-likelihood
//! oracle for the single-block model without covariates, and small random
//! network builders.

use gofnet::graph::{CovariateTensor, Network};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Recursive adaptive Simpson quadrature.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    recurse(
        f,
        a,
        b,
        fa,
        fm,
        fb,
        simpson(fa, fm, fb, a, b),
        tol,
        60,
    )
}

/// Exact log marginal likelihood of the single-block model without
/// covariates, for a graph with `s` edges among `m` unordered pairs,
/// under the default unit Gamma prior on the precision.
///
/// log p(Y) = log Int Gamma(g; 1, 1) Int N(a; 0, 1/g)
///            sigma(a)^s (1 - sigma(a))^(m - s) da dg
///
/// evaluated by nested adaptive quadrature with the precision integrated
/// on the log scale.
pub fn exact_log_marginal_m1(s: u64, m: u64) -> f64 {
    let likelihood = |alpha: f64| -> f64 {
        // sigma(a)^s (1 - sigma(a))^(m-s), evaluated in log space
        let log_g = if alpha > 0.0 {
            -(-alpha).exp().ln_1p()
        } else {
            alpha - alpha.exp().ln_1p()
        };
        let log_1mg = log_g - alpha;
        (s as f64 * log_g + (m - s) as f64 * log_1mg).exp()
    };
    let inner = |gamma: f64| -> f64 {
        let sigma = gamma.powf(-0.5);
        let half = 10.0 * sigma + 60.0;
        let norm = (gamma / (2.0 * std::f64::consts::PI)).sqrt();
        adaptive_simpson(
            &|a: f64| norm * (-0.5 * gamma * a * a).exp() * likelihood(a),
            -half,
            half,
            1e-12,
        )
    };
    // t = ln gamma; Gamma(1,1) density exp(-gamma), Jacobian gamma
    let outer = adaptive_simpson(
        &|t: f64| {
            let gamma = t.exp();
            gamma * (-gamma).exp() * inner(gamma)
        },
        -30.0,
        5.0,
        1e-11,
    );
    outer.ln()
}

/// Erdos-Renyi draw with no covariates.
pub fn random_network(n: usize, p: f64, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                adj[(i, j)] = 1.0;
                adj[(j, i)] = 1.0;
            }
        }
    }
    Network::new(adj, CovariateTensor::empty(n)).unwrap()
}

/// Edge count over unordered pairs.
pub fn edge_count(net: &Network) -> u64 {
    let adj = net.adjacency();
    let mut s = 0;
    for i in 0..net.n() {
        for j in (i + 1)..net.n() {
            if adj[(i, j)] == 1.0 {
                s += 1;
            }
        }
    }
    s
}
