//! Model-averaged posterior-mean estimate of the residual surface phi and
//! its grid export.
//!
//! Each block model contributes a piecewise-constant surface whose cell
//! boundaries are the cumulative sums of Dirichlet block proportions; the
//! joint CDF of those cumulative sums is estimated by Monte Carlo on a
//! shared sample set, with an exact Beta path for K <= 2 kept as an
//! oracle.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::GofError;
use crate::math::logistic;
use crate::seeding::derive_seed;
use crate::vbem::{ModelFit, VariationalState};

/// Joint CDF estimator for the cumulative block proportions
/// (sigma_k)_{k=0..K} with sigma_0 = 0 and sigma_K = 1.
#[derive(Debug, Clone)]
pub enum StickCdf {
    /// Shared Dirichlet sample set; `sigmas` stores the K - 1 interior
    /// cumulative sums per sample, row-major.
    MonteCarlo {
        k: usize,
        n_samples: usize,
        sigmas: Vec<f64>,
    },
    /// Exact nested-Beta evaluation, available for K <= 2.
    Exact { e: Vec<f64> },
}

impl StickCdf {
    pub fn monte_carlo(e: &[f64], n_samples: usize, seed: u64) -> Result<Self, GofError> {
        if n_samples < 1 {
            return Err(GofError::InvalidArgument(
                "n_samples must be >= 1".into(),
            ));
        }
        let k = e.len();
        if k == 0 || e.iter().any(|&x| x <= 0.0) {
            return Err(GofError::InvalidArgument(
                "Dirichlet concentration must be a positive vector".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gammas: Vec<Gamma<f64>> = e
            .iter()
            .map(|&x| Gamma::new(x, 1.0).expect("positive shape"))
            .collect();
        let mut sigmas = Vec::with_capacity(n_samples * (k.saturating_sub(1)));
        let mut draw = vec![0.0; k];
        for _ in 0..n_samples {
            let mut total = 0.0;
            for (slot, g) in draw.iter_mut().zip(&gammas) {
                *slot = g.sample(&mut rng);
                total += *slot;
            }
            let mut acc = 0.0;
            for &v in draw.iter().take(k - 1) {
                acc += v / total;
                sigmas.push(acc);
            }
        }
        Ok(StickCdf::MonteCarlo {
            k,
            n_samples,
            sigmas,
        })
    }

    pub fn exact(e: &[f64]) -> Result<Self, GofError> {
        if e.is_empty() || e.len() > 2 {
            return Err(GofError::InvalidArgument(
                "the exact stick CDF is only available for K <= 2".into(),
            ));
        }
        if e.iter().any(|&x| x <= 0.0) {
            return Err(GofError::InvalidArgument(
                "Dirichlet concentration must be a positive vector".into(),
            ));
        }
        Ok(StickCdf::Exact { e: e.to_vec() })
    }

    pub fn k(&self) -> usize {
        match self {
            StickCdf::MonteCarlo { k, .. } => *k,
            StickCdf::Exact { e } => e.len(),
        }
    }

    /// P(sigma_k <= u, sigma_l <= v) for 0 <= k, l <= K.
    pub fn cdf(&self, k: usize, l: usize, u: f64, v: f64) -> f64 {
        let big_k = self.k();
        assert!(k <= big_k && l <= big_k);
        match self {
            StickCdf::MonteCarlo {
                k: dim,
                n_samples,
                sigmas,
            } => {
                let interior = dim - 1;
                let ind = |row: &[f64], idx: usize, x: f64| -> bool {
                    if idx == 0 {
                        0.0 <= x
                    } else if idx == *dim {
                        1.0 <= x
                    } else {
                        row[idx - 1] <= x
                    }
                };
                let mut hits = 0usize;
                for s in 0..*n_samples {
                    let row = &sigmas[s * interior..(s + 1) * interior];
                    if ind(row, k, u) && ind(row, l, v) {
                        hits += 1;
                    }
                }
                hits as f64 / *n_samples as f64
            }
            StickCdf::Exact { e } => {
                let big_k = e.len();
                // deterministic indicators for the boundary indices
                let det = |idx: usize, x: f64| -> Option<bool> {
                    if idx == 0 {
                        Some(0.0 <= x)
                    } else if idx == big_k {
                        Some(1.0 <= x)
                    } else {
                        None
                    }
                };
                match (det(k, u), det(l, v)) {
                    (Some(a), Some(b)) => (a && b) as u8 as f64,
                    (Some(a), None) => {
                        if a {
                            beta_cdf(e[0], e[1], v)
                        } else {
                            0.0
                        }
                    }
                    (None, Some(b)) => {
                        if b {
                            beta_cdf(e[0], e[1], u)
                        } else {
                            0.0
                        }
                    }
                    // both refer to sigma_1
                    (None, None) => beta_cdf(e[0], e[1], u.min(v)),
                }
            }
        }
    }

    /// Block index (1-based) containing u for one Monte Carlo sample,
    /// using half-open cells [sigma_{k-1}, sigma_k) and a closed last cell.
    fn block_of(row: &[f64], u: f64) -> usize {
        for (idx, &s) in row.iter().enumerate() {
            if u < s {
                return idx + 1;
            }
        }
        row.len() + 1
    }
}

fn beta_cdf(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        Beta::new(a, b).expect("positive shape").cdf(x)
    }
}

/// Permutes blocks so the expected-proportion-weighted row means of
/// m_alpha are non-decreasing, fixing the relabeling ambiguity of the
/// surface. Ties break by ascending e_k.
pub fn identifiability_order(state: &VariationalState) -> VariationalState {
    let k = state.k;
    let total: f64 = state.e_n.iter().sum();
    let mut keys: Vec<(usize, f64, f64)> = (0..k)
        .map(|a| {
            let mean: f64 = (0..k)
                .map(|b| state.e_n[b] / total * state.m_alpha[(a, b)])
                .sum();
            (a, mean, state.e_n[a])
        })
        .collect();
    keys.sort_by(|x, y| {
        x.1.partial_cmp(&y.1)
            .unwrap()
            .then(x.2.partial_cmp(&y.2).unwrap())
            .then(x.0.cmp(&y.0))
    });
    let perm: Vec<usize> = keys.into_iter().map(|(a, _, _)| a).collect();

    let mut out = state.clone();
    for (new_a, &old_a) in perm.iter().enumerate() {
        out.e_n[new_a] = state.e_n[old_a];
        for i in 0..state.tau.nrows() {
            out.tau[(i, new_a)] = state.tau[(i, old_a)];
        }
        for (new_b, &old_b) in perm.iter().enumerate() {
            out.m_alpha[(new_a, new_b)] = state.m_alpha[(old_a, old_b)];
            out.sigma2_alpha[(new_a, new_b)] = state.sigma2_alpha[(old_a, old_b)];
        }
    }
    out
}

/// Settings for the surface estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphonOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Evaluate the Dirichlet CDFs at the prior concentration e0 instead of
    /// the fitted posterior parameters.
    pub use_prior_e: bool,
    /// Prior concentration, used when `use_prior_e` is set.
    pub e0: f64,
    /// Use the exact Beta path for K <= 2 components.
    pub exact_small_k: bool,
}

impl Default for GraphonOptions {
    fn default() -> Self {
        GraphonOptions {
            n_samples: 100_000,
            seed: 0,
            use_prior_e: false,
            e0: 1.0,
            exact_small_k: false,
        }
    }
}

struct Component {
    weight: f64,
    m_alpha: DMatrix<f64>,
    cdf: StickCdf,
}

/// Posterior-mean residual surface, averaged over the fitted models.
pub struct ResidualGraphon {
    components: Vec<Component>,
}

impl ResidualGraphon {
    /// Builds the estimator from the best fit per K and the model
    /// posterior. Identifiability ordering is applied per K before
    /// averaging.
    pub fn new(
        fits: &[ModelFit],
        posterior: &BTreeMap<usize, f64>,
        options: &GraphonOptions,
    ) -> Result<Self, GofError> {
        let mut components = Vec::new();
        for fit in fits {
            let weight = posterior.get(&fit.k).copied().unwrap_or(0.0);
            if weight <= 0.0 {
                continue;
            }
            let ordered = identifiability_order(&fit.state);
            let e: Vec<f64> = if options.use_prior_e {
                vec![options.e0; fit.k]
            } else {
                ordered.e_n.iter().cloned().collect()
            };
            let cdf = if options.exact_small_k && fit.k <= 2 {
                StickCdf::exact(&e)?
            } else {
                StickCdf::monte_carlo(
                    &e,
                    options.n_samples,
                    derive_seed(options.seed, fit.k as u64, 0),
                )?
            };
            components.push(Component {
                weight,
                m_alpha: ordered.m_alpha,
                cdf,
            });
        }
        if components.is_empty() {
            return Err(GofError::ModelSelect(
                "no component with positive posterior weight".into(),
            ));
        }
        Ok(ResidualGraphon { components })
    }

    /// Posterior mean of phi at one point; the surface is symmetric, so
    /// (u, v) and (v, u) agree.
    pub fn phi_at(&self, u: f64, v: f64) -> f64 {
        let (u, v) = if u <= v { (u, v) } else { (v, u) };
        self.components
            .iter()
            .map(|c| c.weight * component_phi(c, u, v))
            .sum()
    }

    /// Evaluates phi on a G x G grid over [0, 1]^2 and applies the
    /// logistic function for the probability-scale surface.
    pub fn export_grid(&self, resolution: usize) -> GraphonGrid {
        assert!(resolution >= 1);
        let g = resolution;
        let coords: Vec<f64> = if g == 1 {
            vec![0.0]
        } else {
            (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
        };

        let mut phi = vec![0.0; g * g];
        for c in &self.components {
            let contrib = match &c.cdf {
                StickCdf::MonteCarlo {
                    k,
                    n_samples,
                    sigmas,
                } => mc_grid(&c.m_alpha, *k, *n_samples, sigmas, &coords),
                StickCdf::Exact { .. } => {
                    let mut out = vec![0.0; g * g];
                    for (i, &u) in coords.iter().enumerate() {
                        for (j, &v) in coords.iter().enumerate() {
                            out[i * g + j] = component_phi(c, u.min(v), u.max(v));
                        }
                    }
                    out
                }
            };
            for (acc, x) in phi.iter_mut().zip(&contrib) {
                *acc += c.weight * x;
            }
        }

        let g_phi = phi.iter().map(|&x| logistic(x)).collect();
        GraphonGrid {
            resolution: g,
            u: coords.clone(),
            v: coords,
            phi_hat: phi,
            g_phi_hat: g_phi,
        }
    }
}

fn component_phi(c: &Component, u: f64, v: f64) -> f64 {
    let big_k = c.cdf.k();
    match &c.cdf {
        StickCdf::MonteCarlo {
            n_samples, sigmas, ..
        } => {
            let interior = big_k - 1;
            let mut total = 0.0;
            for s in 0..*n_samples {
                let row = &sigmas[s * interior..(s + 1) * interior];
                let bu = StickCdf::block_of(row, u);
                let bv = StickCdf::block_of(row, v);
                total += c.m_alpha[(bu - 1, bv - 1)];
            }
            total / *n_samples as f64
        }
        StickCdf::Exact { .. } => {
            let mut total = 0.0;
            for k in 1..=big_k {
                for l in k..=big_k {
                    let rect = rectangle_weight(&c.cdf, k, l, u, v);
                    total += c.m_alpha[(k - 1, l - 1)] * rect;
                }
            }
            total
        }
    }
}

/// F_{k-1,l-1} - F_{k,l-1} - F_{k-1,l} + F_{k,l} with the closed last cell:
/// the upper boundary indicator at sigma_K uses a strict comparison so the
/// point (1, 1) belongs to cell (K, K).
fn rectangle_weight(cdf: &StickCdf, k: usize, l: usize, u: f64, v: f64) -> f64 {
    let big_k = cdf.k();
    let f = |a: usize, b: usize| -> f64 {
        // shrink the boundary CDFs at the top index for points on the
        // closed boundary
        if (a == big_k && u >= 1.0) || (b == big_k && v >= 1.0) {
            0.0
        } else {
            cdf.cdf(a, b, u, v)
        }
    };
    f(k - 1, l - 1) - f(k, l - 1) - f(k - 1, l) + f(k, l)
}

/// Monte Carlo grid evaluation sharing one sample pass across all cells.
///
/// Per sample the surface is blockwise constant with at most K segments on
/// each axis, so each sample contributes K^2 rectangles accumulated with a
/// 2-D difference table.
fn mc_grid(
    m_alpha: &DMatrix<f64>,
    k: usize,
    n_samples: usize,
    sigmas: &[f64],
    coords: &[f64],
) -> Vec<f64> {
    let g = coords.len();
    let interior = k - 1;

    let diff = (0..n_samples)
        .into_par_iter()
        .fold(
            || vec![0.0f64; (g + 1) * (g + 1)],
            |mut acc, s| {
                let row = &sigmas[s * interior..(s + 1) * interior];
                // segment boundaries: grid index where each block starts
                let mut starts = Vec::with_capacity(k + 1);
                starts.push(0usize);
                let mut gi = 0usize;
                for &sigma in row {
                    while gi < g && coords[gi] < sigma {
                        gi += 1;
                    }
                    starts.push(gi);
                }
                starts.push(g);
                for a in 0..k {
                    let (i0, i1) = (starts[a], starts[a + 1]);
                    if i0 == i1 {
                        continue;
                    }
                    for b in 0..k {
                        let (j0, j1) = (starts[b], starts[b + 1]);
                        if j0 == j1 {
                            continue;
                        }
                        let m = m_alpha[(a, b)];
                        acc[i0 * (g + 1) + j0] += m;
                        acc[i1 * (g + 1) + j0] -= m;
                        acc[i0 * (g + 1) + j1] -= m;
                        acc[i1 * (g + 1) + j1] += m;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0.0f64; (g + 1) * (g + 1)],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );

    // 2-D prefix sum over the difference table
    let mut out = vec![0.0; g * g];
    let mut acc = vec![0.0; g + 1];
    for i in 0..g {
        let mut row_acc = 0.0;
        for j in 0..g {
            row_acc += diff[i * (g + 1) + j];
            acc[j] += row_acc;
            out[i * g + j] = acc[j] / n_samples as f64;
        }
    }
    out
}

/// Residual surface evaluated on a regular grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphonGrid {
    pub resolution: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Logit-scale surface, row-major G x G.
    pub phi_hat: Vec<f64>,
    /// Probability-scale surface g(phi_hat).
    pub g_phi_hat: Vec<f64>,
}

impl GraphonGrid {
    pub fn phi(&self, i: usize, j: usize) -> f64 {
        self.phi_hat[i * self.resolution + j]
    }

    pub fn g_phi(&self, i: usize, j: usize) -> f64 {
        self.g_phi_hat[i * self.resolution + j]
    }

    /// Writes rows (u, v, phi, g_phi). `comment` lines are prefixed with
    /// '#' before the header.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "u,v,phi,g_phi")?;
        for (i, &u) in self.u.iter().enumerate() {
            for (j, &v) in self.v.iter().enumerate() {
                writeln!(out, "{u},{v},{},{}", self.phi(i, j), self.g_phi(i, j))?;
            }
        }
        Ok(())
    }
}
