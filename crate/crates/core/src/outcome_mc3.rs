//! MC3 over outcome models with the confounder-targeting prior.
//!
//! Every outcome model regresses `Y` on `[1, X, U_set]`. The prior term for
//! covariate `m` uses `δ̃_m`, the coefficient of `U_m` in whichever of the
//! model or its `U_m`-augmented version contains `U_m`, together with its
//! standard error for the uncertainty integral.

use std::collections::HashMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VarType};
use crate::error::{Error, Result};
use crate::glm::{Family, SubsetFitter};
use crate::mc3::{self, ChainState, ModelRatio};
use crate::model_space::{integrated_prior_component, AdjustmentSet, PriorConfig};
use crate::rng;

/// Exposure inclusion probabilities below this leave the prior term at
/// exactly ½ (the integral would move it by less than `2·π_m`).
pub const NEGLIGIBLE_INCLUSION: f64 = 1e-10;

/// How the prior part of the Metropolis–Hastings ratio is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorRatio {
    /// Ratio of per-model priors `Π_m ∫P(αʸ_m | ·)`, every covariate included.
    /// Chained ratios are path independent.
    #[default]
    Factorized,
    /// Only the term of the flipped covariate. Cheaper, but the chained
    /// ratios depend on the path that first reached a model.
    SingleCoordinate,
}

pub fn outcome_family(data: &Dataset) -> Family {
    match data.outcome_type() {
        VarType::Binary => Family::BernoulliLogit,
        VarType::Continuous => Family::GaussianIdentity,
    }
}

#[derive(Debug, Clone)]
struct OutcomeFit {
    log_marginal: f64,
    coefficients: Vec<f64>,
    /// Coefficient and SE of each `U_m`; NaN when excluded.
    u_coef: Vec<f64>,
    u_se: Vec<f64>,
}

fn columns_for(set: &AdjustmentSet) -> Vec<usize> {
    [0, 1].into_iter().chain(set.included().map(|m| m + 2)).collect()
}

/// Outcome model space with memoized fits and prior terms.
pub struct OutcomeSpace {
    fitter: SubsetFitter,
    prior: PriorConfig,
    pi: Vec<f64>,
    kind: PriorRatio,
    fits: HashMap<AdjustmentSet, Option<OutcomeFit>>,
    log_priors: HashMap<AdjustmentSet, Option<f64>>,
    failed: usize,
}

impl OutcomeSpace {
    pub fn new(data: &Dataset, prior: PriorConfig, pi: Vec<f64>, kind: PriorRatio) -> Result<Self> {
        let m = data.m();
        if pi.len() != m {
            return Err(Error::DimensionMismatch {
                what: "exposure inclusion probabilities",
                expected: m,
                found: pi.len(),
            });
        }
        if prior.sigma_u.len() != m {
            return Err(Error::DimensionMismatch {
                what: "covariate scales",
                expected: m,
                found: prior.sigma_u.len(),
            });
        }
        let columns = data.outcome_design(&AdjustmentSet::full(m));
        Ok(Self {
            fitter: SubsetFitter::new(columns, data.y(), outcome_family(data)),
            prior,
            pi,
            kind,
            fits: HashMap::new(),
            log_priors: HashMap::new(),
            failed: 0,
        })
    }

    pub fn m(&self) -> usize {
        self.pi.len()
    }

    pub fn n(&self) -> usize {
        self.fitter.n()
    }

    pub fn kind(&self) -> PriorRatio {
        self.kind
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn inclusion_probs(&self) -> &[f64] {
        &self.pi
    }

    /// Number of distinct models whose fit failed.
    pub fn failed_fits(&self) -> usize {
        self.failed
    }

    pub fn fitted_models(&self) -> usize {
        self.fits.len()
    }

    fn fit(&mut self, set: &AdjustmentSet) -> Option<&OutcomeFit> {
        if !self.fits.contains_key(set) {
            let warm = self.warm_start_for(set);
            let fit = match self.fitter.fit(&columns_for(set), warm.as_deref()) {
                Ok(f) if f.converged && f.log_likelihood.is_finite() => {
                    let m = self.m();
                    let mut u_coef = vec![f64::NAN; m];
                    let mut u_se = vec![f64::NAN; m];
                    for (r, k) in set.included().enumerate() {
                        u_coef[k] = f.coefficients[r + 2];
                        u_se[k] = f.standard_errors[r + 2];
                    }
                    Some(OutcomeFit {
                        log_marginal: f.log_marginal_bic(self.n()),
                        coefficients: f.coefficients,
                        u_coef,
                        u_se,
                    })
                }
                Ok(_) => {
                    debug!("outcome model {set} did not converge; candidate rejected");
                    None
                }
                Err(e) => {
                    debug!("outcome model {set} failed: {e}; candidate rejected");
                    None
                }
            };
            if fit.is_none() {
                self.failed += 1;
            }
            self.fits.insert(set.clone(), fit);
        }
        self.fits[set].as_ref()
    }

    /// Coefficients of an already-fitted neighbour, realigned to `set`.
    fn warm_start_for(&self, set: &AdjustmentSet) -> Option<Vec<f64>> {
        if matches!(self.fitter, SubsetFitter::Gaussian(_)) {
            return None;
        }
        (0..set.len()).find_map(|m| {
            let nb = set.flipped(m);
            let fit = self.fits.get(&nb)?.as_ref()?;
            let mut coefs = fit.coefficients.clone();
            if nb.contains(m) {
                coefs.remove(2 + nb.rank_of(m)?);
            } else {
                coefs.insert(2 + nb.included().filter(|&k| k < m).count(), 0.0);
            }
            Some(coefs)
        })
    }

    /// BIC log marginal likelihood of the outcome model on `set`.
    pub fn log_marginal(&mut self, set: &AdjustmentSet) -> Option<f64> {
        self.fit(set).map(|f| f.log_marginal)
    }

    /// `(δ̂_m, SE)` for covariate `m` relative to `set`.
    pub fn delta_tilde(&mut self, set: &AdjustmentSet, m: usize) -> Option<(f64, f64)> {
        let holder = if set.contains(m) {
            set.clone()
        } else {
            set.with(m, true)
        };
        let fit = self.fit(&holder)?;
        Some((fit.u_coef[m], fit.u_se[m]))
    }

    /// `ln ∫ P(αʸ_m = set_m | ·, δ̃) f(δ̃) dδ̃`.
    pub fn log_prior_component(&mut self, set: &AdjustmentSet, m: usize) -> Option<f64> {
        let pi_m = self.pi[m];
        if pi_m < NEGLIGIBLE_INCLUSION {
            return Some(0.5f64.ln());
        }
        let (delta, se) = self.delta_tilde(set, m)?;
        let c = integrated_prior_component(delta, se, pi_m, m, set.contains(m), &self.prior);
        Some(c.ln())
    }

    /// `Σ_m ln ∫ P(αʸ_m | ·)`.
    pub fn log_prior(&mut self, set: &AdjustmentSet) -> Option<f64> {
        if let Some(hit) = self.log_priors.get(set) {
            return *hit;
        }
        let mut total = Some(0.0);
        for m in 0..self.m() {
            match self.log_prior_component(set, m) {
                Some(v) => total = total.map(|t| t + v),
                None => {
                    total = None;
                    break;
                }
            }
        }
        self.log_priors.insert(set.clone(), total);
        total
    }

    /// Unnormalized log posterior under the factorized prior.
    pub fn log_score(&mut self, set: &AdjustmentSet) -> Option<f64> {
        let lm = self.log_marginal(set)?;
        Some(lm + self.log_prior(set)?)
    }

    /// Log Metropolis–Hastings ratio for moving from `current` to
    /// `candidate`, which differ only in covariate `m`. `−∞` when the
    /// candidate cannot be fitted.
    pub fn mh_log_ratio(&mut self, candidate: &AdjustmentSet, current: &AdjustmentSet, m: usize) -> Result<f64> {
        if candidate.len() != current.len() || candidate.hamming(current) > 1 {
            return Err(Error::InvalidInput(
                "MH ratio needs models differing in at most one covariate".into(),
            ));
        }
        if candidate == current {
            return Ok(0.0);
        }
        if candidate.contains(m) == current.contains(m) {
            return Err(Error::InvalidInput(format!(
                "models do not differ in covariate {m}"
            )));
        }
        Ok(self.ratio(candidate, current, m).unwrap_or(f64::NEG_INFINITY))
    }

    fn ratio(&mut self, candidate: &AdjustmentSet, current: &AdjustmentSet, m: usize) -> Option<f64> {
        match self.kind {
            PriorRatio::Factorized => {
                let cand = self.log_score(candidate)?;
                let curr = self.log_score(current)?;
                Some(cand - curr)
            }
            PriorRatio::SingleCoordinate => {
                let lm = self.log_marginal(candidate)? - self.log_marginal(current)?;
                let lp = self.log_prior_component(candidate, m)?
                    - self.log_prior_component(current, m)?;
                Some(lm + lp)
            }
        }
    }
}

impl ModelRatio for OutcomeSpace {
    fn log_ratio(&mut self, candidate: &AdjustmentSet, current: &AdjustmentSet, m: usize) -> Option<f64> {
        self.ratio(candidate, current, m)
    }
}

/// Start with every covariate whose exposure inclusion probability is ≥ ½.
pub fn default_start(pi: &[f64]) -> AdjustmentSet {
    AdjustmentSet::from_bits(pi.iter().map(|p| *p >= 0.5).collect())
}

/// Run the outcome chain for `iterations` steps from `start`.
pub fn run_chain(
    space: &mut OutcomeSpace,
    iterations: usize,
    start: AdjustmentSet,
    seed: u64,
) -> Result<ChainState> {
    if iterations == 0 {
        return Err(Error::InvalidInput("MC3 needs at least one iteration".into()));
    }
    if start.len() != space.m() {
        return Err(Error::DimensionMismatch {
            what: "start model",
            expected: space.m(),
            found: start.len(),
        });
    }
    let ok = match space.kind {
        PriorRatio::Factorized => space.log_score(&start).is_some(),
        PriorRatio::SingleCoordinate => space.log_marginal(&start).is_some(),
    };
    if !ok {
        return Err(Error::Estimation(format!(
            "starting outcome model {start} could not be fitted"
        )));
    }
    let mut r = rng::seeded(seed);
    Ok(mc3::run_chain(space, start, iterations, &mut r))
}

pub fn posterior_weights(state: &ChainState) -> Vec<(AdjustmentSet, f64)> {
    state.posterior_weights()
}
