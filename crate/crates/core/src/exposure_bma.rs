//! Posterior over exposure models and the marginal inclusion probabilities
//! that feed the outcome-model prior.

use std::collections::HashMap;

use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VarType};
use crate::error::{Error, Result};
use crate::glm::{Family, SubsetFitter};
use crate::mc3::{normalize_log_weights, run_chain, ModelRatio};
use crate::model_space::AdjustmentSet;
use crate::par;
use crate::rng;

/// Largest `M` for which all `2^M` exposure models are enumerated.
pub const ENUMERATION_MAX_M: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    ExactEnumeration,
    Mc3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureSearch {
    /// MC3 length; `None` uses `min(500·M, 50 000)`.
    pub iterations: Option<usize>,
    pub enumeration_max_m: usize,
}

impl Default for ExposureSearch {
    fn default() -> Self {
        Self {
            iterations: None,
            enumeration_max_m: ENUMERATION_MAX_M,
        }
    }
}

pub fn default_exposure_iterations(m: usize) -> usize {
    (5 * m * 100).min(50_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposurePosterior {
    pub inclusion_probs: Vec<f64>,
    pub models: Vec<(AdjustmentSet, f64)>,
    pub method: SearchMethod,
    pub failed_fits: usize,
}

pub fn exposure_family(data: &Dataset) -> Family {
    match data.exposure_type() {
        VarType::Binary => Family::BernoulliLogit,
        VarType::Continuous => Family::GaussianIdentity,
    }
}

/// Candidate columns `[1, U_1, …, U_M]`.
fn exposure_columns(data: &Dataset) -> DMatrix<f64> {
    data.exposure_design(&AdjustmentSet::full(data.m()))
}

fn columns_for(set: &AdjustmentSet) -> Vec<usize> {
    std::iter::once(0).chain(set.included().map(|m| m + 1)).collect()
}

/// BIC log marginal likelihood of the exposure model on `set`, or `None`
/// when the fit fails.
fn score(fitter: &SubsetFitter, set: &AdjustmentSet, start: Option<&[f64]>) -> Option<(f64, Vec<f64>)> {
    match fitter.fit(&columns_for(set), start) {
        Ok(fit) if fit.converged && fit.log_likelihood.is_finite() => {
            Some((fit.log_marginal_bic(fitter.n()), fit.coefficients))
        }
        Ok(_) => {
            debug!("exposure model {set} did not converge; dropped from the support");
            None
        }
        Err(e) => {
            debug!("exposure model {set} failed: {e}; dropped from the support");
            None
        }
    }
}

struct ExposureRatio<'a> {
    fitter: &'a SubsetFitter,
    cache: HashMap<AdjustmentSet, Option<(f64, Vec<f64>)>>,
    failed: usize,
}

impl ExposureRatio<'_> {
    fn lookup(&mut self, set: &AdjustmentSet, warm: Option<Vec<f64>>) -> Option<f64> {
        if let Some(hit) = self.cache.get(set) {
            return hit.as_ref().map(|(s, _)| *s);
        }
        let result = score(self.fitter, set, warm.as_deref());
        if result.is_none() {
            self.failed += 1;
        }
        let s = result.as_ref().map(|(s, _)| *s);
        self.cache.insert(set.clone(), result);
        s
    }
}

/// Warm start for `candidate` from the coefficients of `current`, which
/// differs by covariate `m`.
fn warm_start(current: &AdjustmentSet, coefs: &[f64], m: usize) -> Vec<f64> {
    let mut out = coefs.to_vec();
    if current.contains(m) {
        let r = 1 + current.rank_of(m).expect("included");
        out.remove(r);
    } else {
        let r = 1 + current.included().filter(|&k| k < m).count();
        out.insert(r, 0.0);
    }
    out
}

impl ModelRatio for ExposureRatio<'_> {
    fn log_ratio(&mut self, candidate: &AdjustmentSet, current: &AdjustmentSet, m: usize) -> Option<f64> {
        let warm = self
            .cache
            .get(current)
            .and_then(|c| c.as_ref())
            .map(|(_, coefs)| warm_start(current, coefs, m));
        let cand = self.lookup(candidate, warm)?;
        let curr = self.lookup(current, None)?;
        Some(cand - curr)
    }
}

fn summarize(
    m: usize,
    scored: Vec<(AdjustmentSet, f64)>,
    method: SearchMethod,
    failed_fits: usize,
) -> Result<ExposurePosterior> {
    if scored.is_empty() {
        return Err(Error::Estimation(
            "every exposure model fit failed; cannot form the exposure posterior".into(),
        ));
    }
    let models = normalize_log_weights(scored);
    let mut inclusion_probs = vec![0.0; m];
    for (set, p) in &models {
        for k in set.included() {
            inclusion_probs[k] += p;
        }
    }
    Ok(ExposurePosterior {
        inclusion_probs,
        models,
        method,
        failed_fits,
    })
}

/// Posterior `P(αˣ | X)` under a uniform model prior and BIC marginal likelihoods.
pub fn exposure_posterior(data: &Dataset, search: &ExposureSearch, seed: u64) -> Result<ExposurePosterior> {
    let m = data.m();
    let fitter = SubsetFitter::new(exposure_columns(data), data.x(), exposure_family(data));
    if m <= search.enumeration_max_m {
        let results = par::map_range(1usize << m, |k| {
            let set = AdjustmentSet::from_index(m, k as u64);
            score(&fitter, &set, None).map(|(s, _)| (set, s))
        });
        let failed = results.iter().filter(|r| r.is_none()).count();
        let scored: Vec<_> = results.into_iter().flatten().collect();
        return summarize(m, scored, SearchMethod::ExactEnumeration, failed);
    }

    let iterations = search
        .iterations
        .unwrap_or_else(|| default_exposure_iterations(m));
    let mut ratio = ExposureRatio {
        fitter: &fitter,
        cache: HashMap::new(),
        failed: 0,
    };
    let start = AdjustmentSet::empty(m);
    if ratio.lookup(&start, None).is_none() {
        return Err(Error::Estimation(
            "intercept-only exposure model failed to fit".into(),
        ));
    }
    let mut chain_rng = rng::seeded(seed);
    let state = run_chain(&mut ratio, start, iterations, &mut chain_rng);
    let scored = state.visited.into_iter().collect();
    summarize(m, scored, SearchMethod::Mc3, ratio.failed)
}
