//! Model-averaged double robust estimation.
//!
//! Runs the exposure posterior, the outcome chain, a TMLE for every outcome
//! model with non-negligible weight, and combines them into posterior moments.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exposure_bma::{exposure_posterior, ExposureSearch, SearchMethod};
use crate::model_space::{default_omega, AdjustmentSet, DeltaIntegral, PriorConfig};
use crate::outcome_mc3::{self, OutcomeSpace, PriorRatio};
use crate::rng::derive_seed;
use crate::tmle::{self, Contrast, ModelEstimate};
use crate::par;

/// Models whose posterior weight falls below this are dropped before the
/// TMLE step and the remaining weights renormalized.
pub const WEIGHT_FLOOR: f64 = 1e-10;
/// Under bootstrap variance, models at or below this weight use the
/// influence-function variance instead.
pub const BOOTSTRAP_WEIGHT_FLOOR: f64 = 1e-6;
const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    #[default]
    Eif,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbceeConfig {
    pub omega_c: f64,
    pub omega_b: f64,
    pub mc3_iterations: usize,
    pub variance_method: VarianceMethod,
    pub bootstrap_b: usize,
    pub contrast: Contrast,
    pub delta_integral: DeltaIntegral,
    pub prior_ratio: PriorRatio,
    pub exposure_search: ExposureSearch,
    pub seed: u64,
}

impl Default for GbceeConfig {
    fn default() -> Self {
        Self {
            omega_c: 500.0,
            omega_b: 0.5,
            mc3_iterations: 2000,
            variance_method: VarianceMethod::Eif,
            bootstrap_b: 200,
            contrast: Contrast::difference(),
            delta_integral: DeltaIntegral::Exact,
            prior_ratio: PriorRatio::Factorized,
            exposure_search: ExposureSearch::default(),
            seed: 0,
        }
    }
}

impl GbceeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc3_iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        if !(self.omega_b > 0.0 && self.omega_b < 1.0) {
            return Err(Error::InvalidInput(format!(
                "omega exponent must lie in (0, 1), got {}",
                self.omega_b
            )));
        }
        if !(self.omega_c.is_finite() && self.omega_c >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "omega multiplier must be finite and non-negative, got {}",
                self.omega_c
            )));
        }
        if self.variance_method == VarianceMethod::Bootstrap && self.bootstrap_b < 2 {
            return Err(Error::InvalidInput("bootstrap needs at least 2 replicates".into()));
        }
        if self.delta_integral == (DeltaIntegral::GaussHermite { nodes: 0 }) {
            return Err(Error::InvalidInput("quadrature needs at least one node".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedModel {
    pub set: AdjustmentSet,
    pub weight: f64,
    pub estimate: ModelEstimate,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub exposure_method: Option<SearchMethod>,
    pub exposure_failed_fits: usize,
    pub outcome_failed_fits: usize,
    pub chain_iterations: usize,
    pub chain_acceptance_rate: f64,
    pub visited_models: usize,
    pub pruned_models: usize,
    pub failed_estimates: usize,
    pub positivity_truncations: usize,
    pub out_of_range_predictions: usize,
    pub bootstrap_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbceeResult {
    pub delta_hat: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub omega: f64,
    /// Sorted by decreasing weight.
    pub models: Vec<WeightedModel>,
    pub inclusion_probs_outcome: Vec<f64>,
    pub inclusion_probs_exposure: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Posterior mean and variance of a mixture of `(weight, estimate, variance)`.
pub fn posterior_moments(parts: &[(f64, f64, f64)]) -> (f64, f64) {
    let mean: f64 = parts.iter().map(|(w, d, _)| w * d).sum();
    let second: f64 = parts.iter().map(|(w, d, v)| w * (v + d * d)).sum();
    let var = second - mean * mean;
    (mean, var.max(0.0))
}

fn inclusion(models: &[WeightedModel], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for wm in models {
        for k in wm.set.included() {
            out[k] += wm.weight;
        }
    }
    out
}

pub fn estimate(data: &Dataset, cfg: &GbceeConfig) -> Result<GbceeResult> {
    cfg.validate()?;
    cfg.contrast.validate(data)?;
    let m = data.m();
    let n = data.n();
    let omega = default_omega(n, cfg.omega_c, cfg.omega_b);
    let mut diag = Diagnostics::default();

    let exposure = exposure_posterior(data, &cfg.exposure_search, derive_seed(cfg.seed, 0))?;
    diag.exposure_method = Some(exposure.method);
    diag.exposure_failed_fits = exposure.failed_fits;

    let prior = PriorConfig::from_data(data, omega, cfg.delta_integral)?;
    let mut space = OutcomeSpace::new(data, prior, exposure.inclusion_probs.clone(), cfg.prior_ratio)?;
    let start = outcome_mc3::default_start(&exposure.inclusion_probs);
    let chain = outcome_mc3::run_chain(&mut space, cfg.mc3_iterations, start, derive_seed(cfg.seed, 1))?;
    diag.outcome_failed_fits = space.failed_fits();
    diag.chain_iterations = chain.iterations;
    diag.chain_acceptance_rate = chain.acceptance_rate();
    diag.visited_models = chain.visited.len();

    let weights = outcome_mc3::posterior_weights(&chain);
    let kept: Vec<(AdjustmentSet, f64)> = weights
        .into_iter()
        .filter(|(_, w)| *w >= WEIGHT_FLOOR)
        .collect();
    diag.pruned_models = diag.visited_models - kept.len();

    let boot_seed = derive_seed(cfg.seed, 2);
    let kept_total: f64 = kept.iter().map(|(_, w)| w).sum();
    let per_model = par::map_slice(&kept, |(set, w)| {
        let mut est = tmle::estimate(data, set, &cfg.contrast)?;
        let mut boot_failures = 0;
        if cfg.variance_method == VarianceMethod::Bootstrap && w / kept_total > BOOTSTRAP_WEIGHT_FLOOR {
            let seed = derive_seed(boot_seed, set_key(set));
            let b = tmle::bootstrap_variance(data, set, &cfg.contrast, cfg.bootstrap_b, seed)?;
            est.variance = b.variance;
            boot_failures = b.failures;
        }
        Ok::<_, Error>((est, boot_failures))
    });

    let mut models = Vec::with_capacity(kept.len());
    for ((set, w), r) in kept.into_iter().zip(per_model) {
        match r {
            Ok((est, bf)) => {
                diag.positivity_truncations += est.truncated;
                diag.out_of_range_predictions += est.out_of_range;
                diag.bootstrap_failures += bf;
                models.push(WeightedModel {
                    set,
                    weight: w,
                    estimate: est,
                });
            }
            Err(e) => {
                warn!("estimate for model {set} failed: {e}; model dropped");
                diag.failed_estimates += 1;
            }
        }
    }
    if models.is_empty() {
        return Err(Error::Estimation(
            "no outcome model produced an estimate".into(),
        ));
    }
    let total: f64 = models.iter().map(|wm| wm.weight).sum();
    for wm in &mut models {
        wm.weight /= total;
    }
    models.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.set.cmp(&b.set)));

    let parts: Vec<_> = models
        .iter()
        .map(|wm| (wm.weight, wm.estimate.delta_hat, wm.estimate.variance))
        .collect();
    let (delta_hat, variance) = posterior_moments(&parts);
    let half = Z_975 * variance.sqrt();
    Ok(GbceeResult {
        delta_hat,
        variance,
        ci_low: delta_hat - half,
        ci_high: delta_hat + half,
        omega,
        inclusion_probs_outcome: inclusion(&models, m),
        inclusion_probs_exposure: exposure.inclusion_probs,
        models,
        diagnostics: diag,
    })
}

/// Stable 64-bit key of an adjustment set, used to derive per-model seeds.
fn set_key(set: &AdjustmentSet) -> u64 {
    set.included()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, k| {
            (h ^ (k as u64 + 1)).wrapping_mul(0x0100_0000_01b3)
        })
}
