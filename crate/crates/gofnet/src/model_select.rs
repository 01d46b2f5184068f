//! Model posterior, goodness-of-fit probability and Bayes factor from the
//! per-K optimized bounds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::GofError;
use crate::math::log_sum_exp;

/// Model-selection summary for a fitted network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// K -> optimized lower bound.
    pub bounds: BTreeMap<usize, f64>,
    /// K -> approximate posterior probability of M_K.
    pub posterior: BTreeMap<usize, f64>,
    pub p_h0: f64,
    /// Posterior-odds Bayes factor of H0 against the union of K >= 2;
    /// `None` encodes +infinity (p_h0 numerically 1).
    pub bayes_factor_01: Option<f64>,
}

/// Normalizes p(M_K) exp{L_K} over the models with finite bounds.
///
/// `model_prior[K - 1]` is p(M_K). Failed fits may be absent from
/// `bounds`; models with bound -infinity are dropped with a warning.
pub fn model_posterior(
    bounds: &BTreeMap<usize, f64>,
    model_prior: &[f64],
) -> Result<BTreeMap<usize, f64>, GofError> {
    let mut ks = Vec::new();
    let mut logs = Vec::new();
    for (&k, &bound) in bounds {
        let prior = *model_prior.get(k - 1).ok_or_else(|| {
            GofError::ModelSelect(format!("no prior probability declared for K = {k}"))
        })?;
        if !bound.is_finite() {
            log::warn!("dropping K = {k} from model posterior (bound {bound})");
            continue;
        }
        if prior <= 0.0 {
            continue;
        }
        ks.push(k);
        logs.push(prior.ln() + bound);
    }
    if ks.is_empty() {
        return Err(GofError::ModelSelect(
            "no model with a finite bound and positive prior".into(),
        ));
    }
    let norm = log_sum_exp(&logs);
    Ok(ks
        .into_iter()
        .zip(logs)
        .map(|(k, l)| (k, (l - norm).exp()))
        .collect())
}

/// Posterior probability of H0 and the Bayes factor B01.
///
/// With equal priors p(H0) = p(H1') the Bayes factor reduces to the
/// posterior odds p_h0 / (1 - p_h0).
pub fn gof(posterior: &BTreeMap<usize, f64>) -> (f64, Option<f64>) {
    gof_with_priors(posterior, 0.5, 0.5)
}

pub fn gof_with_priors(
    posterior: &BTreeMap<usize, f64>,
    prior_h0: f64,
    prior_h1: f64,
) -> (f64, Option<f64>) {
    let p_h0 = posterior.get(&1).copied().unwrap_or(0.0);
    let odds_ratio = prior_h1 / prior_h0;
    let bf = if p_h0 >= 1.0 {
        None
    } else {
        Some(p_h0 / (1.0 - p_h0) * odds_ratio)
    };
    (p_h0, bf)
}

/// Assembles the full result from bounds and the model prior.
pub fn fit_result(
    bounds: &BTreeMap<usize, f64>,
    model_prior: &[f64],
) -> Result<FitResult, GofError> {
    let posterior = model_posterior(bounds, model_prior)?;
    let prior_h0 = model_prior.first().copied().unwrap_or(0.5);
    let prior_h1: f64 = model_prior.iter().skip(1).sum();
    let (p_h0, bayes_factor_01) = if prior_h1 > 0.0 {
        gof_with_priors(&posterior, prior_h0, prior_h1)
    } else {
        // single-model setting: H0 holds by construction
        (posterior.get(&1).copied().unwrap_or(0.0), None)
    };
    Ok(FitResult {
        bounds: bounds.clone(),
        posterior,
        p_h0,
        bayes_factor_01,
    })
}
