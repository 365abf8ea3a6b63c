//! Targeted maximum likelihood estimators for a fixed adjustment set.
//!
//! Both nuisance models use exactly the covariates of the adjustment set:
//! the outcome model regresses `Y` on `[1, X, U_set]`, the exposure model
//! regresses `X` on `[1, U_set]`.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mean_sd_mle, sample_variance, Dataset, VarType};
use crate::error::{Error, Result};
use crate::exposure_bma::exposure_family;
use crate::glm::{expit, fit_glm, logit, predict, GlmFit, PROB_CLAMP};
use crate::model_space::AdjustmentSet;
use crate::outcome_mc3::outcome_family;
use crate::{par, rng};

/// Propensity predictions are truncated to `[PROPENSITY_FLOOR, 1 − PROPENSITY_FLOOR]`.
pub const PROPENSITY_FLOOR: f64 = 0.005;
/// Cap on the density ratio used as clever covariate for continuous exposures.
pub const DENSITY_RATIO_CAP: f64 = 200.0;
/// More than this fraction of failed bootstrap replicates is an error.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastKind {
    #[default]
    Difference,
    Ratio,
}

/// Causal contrast. For a binary exposure the levels are always `(1, 0)`;
/// with continuous `Y` and `X` the contrast is the effect of a unit shift and
/// `levels` is ignored; with binary `Y` and continuous `X` the caller supplies
/// `(x, x′)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Contrast {
    pub kind: ContrastKind,
    pub levels: Option<(f64, f64)>,
}

impl Contrast {
    pub fn difference() -> Self {
        Self::default()
    }

    pub fn ratio() -> Self {
        Self {
            kind: ContrastKind::Ratio,
            levels: None,
        }
    }

    pub fn at_levels(kind: ContrastKind, x: f64, x_prime: f64) -> Self {
        Self {
            kind,
            levels: Some((x, x_prime)),
        }
    }

    /// Check the contrast against the variable types of `data`.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let binary_y = data.outcome_type() == VarType::Binary;
        if self.kind == ContrastKind::Ratio && !binary_y {
            return Err(Error::InvalidInput(
                "ratio contrasts need a binary outcome".into(),
            ));
        }
        if binary_y && data.exposure_type() == VarType::Continuous {
            match self.levels {
                None => {
                    return Err(Error::InvalidInput(
                        "binary outcome with continuous exposure needs levels x and x'".into(),
                    ))
                }
                Some((a, b)) if a == b || !a.is_finite() || !b.is_finite() => {
                    return Err(Error::InvalidInput(format!(
                        "exposure levels must be finite and distinct, got {a} and {b}"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Targeted estimate of `E[Y^x]` at one exposure level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMean {
    pub mean: f64,
    pub eif: Vec<f64>,
    pub epsilon: f64,
    /// Rows whose propensity or density ratio hit the positivity guard.
    pub truncated: usize,
    /// Updated predictions outside `[0, 1]` (additive fluctuation of a binary outcome).
    pub out_of_range: usize,
}

/// TMLE output for one adjustment set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEstimate {
    pub delta_hat: f64,
    pub variance: f64,
    pub epsilon: Vec<f64>,
    /// Targeted means of the two levels; empty for the unit-shift contrast.
    pub level_means: Vec<f64>,
    pub truncated: usize,
    pub out_of_range: usize,
    #[serde(skip)]
    pub eif: Vec<f64>,
}

/// Sample variance of the influence values divided by `n`.
pub fn eif_variance(eif: &[f64]) -> f64 {
    if eif.is_empty() {
        return 0.0;
    }
    sample_variance(eif) / eif.len() as f64
}

/// Nuisance fits shared by both levels of a contrast.
pub struct NuisanceFits {
    pub outcome: GlmFit,
    pub exposure: GlmFit,
}

pub fn fit_nuisance(data: &Dataset, set: &AdjustmentSet) -> Result<NuisanceFits> {
    let outcome = fit_glm(&data.outcome_design(set), data.y(), outcome_family(data))?;
    if !outcome.converged {
        return Err(Error::Estimation(format!(
            "outcome model {set} did not converge"
        )));
    }
    let exposure = fit_glm(&data.exposure_design(set), data.x(), exposure_family(data))?;
    if !exposure.converged {
        debug!("exposure model {set} did not converge; using its last iterate");
    }
    Ok(NuisanceFits { outcome, exposure })
}

/// Continuous outcome and exposure: effect of a unit shift in `X`.
pub fn tmle_cont_cont(data: &Dataset, set: &AdjustmentSet) -> Result<ModelEstimate> {
    let fits = fit_nuisance(data, set)?;
    cont_cont_with(data, &fits)
}

fn cont_cont_with(data: &Dataset, fits: &NuisanceFits) -> Result<ModelEstimate> {
    let n = data.n() as f64;
    let beta = fits.outcome.coefficients[1];
    let rx: Vec<f64> = data
        .x()
        .iter()
        .zip(&fits.exposure.fitted_values)
        .map(|(x, xh)| x - xh)
        .collect();
    let ssx: f64 = rx.iter().map(|r| r * r).sum();
    let (_, sd_x) = mean_sd_mle(data.x());
    if ssx <= 1e-12 * n * sd_x.powi(2).max(f64::MIN_POSITIVE) {
        return Err(Error::Fluctuation(
            "exposure fully explained by the covariates".into(),
        ));
    }
    let ry: Vec<f64> = data
        .y()
        .iter()
        .zip(&fits.outcome.fitted_values)
        .map(|(y, yh)| y - yh)
        .collect();
    let epsilon = ry.iter().zip(&rx).map(|(a, b)| a * b).sum::<f64>() / ssx;
    let scale = ssx / n;
    let eif: Vec<f64> = rx
        .iter()
        .zip(&ry)
        .map(|(r, e)| r * (e - epsilon * r) / scale)
        .collect();
    Ok(ModelEstimate {
        delta_hat: beta + epsilon,
        variance: eif_variance(&eif),
        epsilon: vec![epsilon],
        level_means: Vec::new(),
        truncated: 0,
        out_of_range: 0,
        eif,
    })
}

/// Targeted `E[Y^x]` for a binary exposure.
pub fn tmle_mean_binx(data: &Dataset, set: &AdjustmentSet, x: bool) -> Result<LevelMean> {
    let fits = fit_nuisance(data, set)?;
    binx_with(data, set, &fits, x)
}

fn binx_with(data: &Dataset, set: &AdjustmentSet, fits: &NuisanceFits, x: bool) -> Result<LevelMean> {
    let level = if x { 1.0 } else { 0.0 };
    let q0 = predict(&fits.outcome, &data.outcome_design_at(set, level))?;
    let mut truncated = 0;
    let w: Vec<f64> = data
        .x()
        .iter()
        .zip(&fits.exposure.fitted_values)
        .map(|(&xi, &p1)| {
            let p = p1.clamp(PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR);
            if p != p1 {
                truncated += 1;
            }
            if (xi == 1.0) == x {
                1.0 / if x { p } else { 1.0 - p }
            } else {
                0.0
            }
        })
        .collect();
    if truncated > 0 {
        debug!("{truncated} propensities truncated to [{PROPENSITY_FLOOR}, {}]", 1.0 - PROPENSITY_FLOOR);
    }
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Fluctuation(format!(
            "no observation has exposure level {level}"
        )));
    }
    let epsilon = data
        .y()
        .iter()
        .zip(&q0)
        .zip(&w)
        .map(|((y, q), w)| w * (y - q))
        .sum::<f64>()
        / wsum;
    let q1: Vec<f64> = q0.iter().map(|q| q + epsilon).collect();
    let out_of_range = if data.outcome_type() == VarType::Binary {
        q1.iter().filter(|q| !(0.0..=1.0).contains(*q)).count()
    } else {
        0
    };
    let mean = q1.iter().sum::<f64>() / q1.len() as f64;
    let eif = data
        .y()
        .iter()
        .zip(&q1)
        .zip(&w)
        .map(|((y, q), w)| w * (y - q) + q - mean)
        .collect();
    Ok(LevelMean {
        mean,
        eif,
        epsilon,
        truncated,
        out_of_range,
    })
}

/// Targeted `E[Y^x]` for a binary outcome and continuous exposure.
pub fn tmle_bin_cont(data: &Dataset, set: &AdjustmentSet, x: f64) -> Result<LevelMean> {
    let fits = fit_nuisance(data, set)?;
    bin_cont_with(data, set, &fits, x)
}

fn normal_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

fn bin_cont_with(data: &Dataset, set: &AdjustmentSet, fits: &NuisanceFits, x: f64) -> Result<LevelMean> {
    let q0 = predict(&fits.outcome, &data.outcome_design_at(set, x))?;
    let (mx, sx) = mean_sd_mle(data.x());
    let sd_cond = fits.exposure.dispersion.sqrt();
    if sx <= 0.0 || sd_cond <= 0.0 {
        return Err(Error::Fluctuation(
            "exposure density is degenerate".into(),
        ));
    }
    let f_marg = normal_density(x, mx, sx);
    let mut truncated = 0;
    let h: Vec<f64> = fits
        .exposure
        .fitted_values
        .iter()
        .map(|&xh| {
            let r = f_marg / normal_density(x, xh, sd_cond);
            if r.is_finite() && r <= DENSITY_RATIO_CAP {
                r
            } else {
                truncated += 1;
                DENSITY_RATIO_CAP
            }
        })
        .collect();
    if truncated > 0 {
        debug!("{truncated} density ratios capped at {DENSITY_RATIO_CAP}");
    }
    let offset: Vec<f64> = q0
        .iter()
        .map(|q| logit(q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)))
        .collect();
    let epsilon = logistic_fluctuation(data.y(), &offset, &h)?;
    let q1: Vec<f64> = offset
        .iter()
        .zip(&h)
        .map(|(o, hi)| expit(o + epsilon * hi))
        .collect();
    let mean = q1.iter().sum::<f64>() / q1.len() as f64;
    let eif = data
        .y()
        .iter()
        .zip(&q1)
        .zip(&h)
        .map(|((y, q), hi)| hi * (y - q) + q - mean)
        .collect();
    Ok(LevelMean {
        mean,
        eif,
        epsilon,
        truncated,
        out_of_range: 0,
    })
}

/// Maximum-likelihood `ε` of a no-intercept logistic regression of `y` on
/// `h` with offset `o`, by damped Newton steps on the concave log-likelihood.
fn logistic_fluctuation(y: &[f64], o: &[f64], h: &[f64]) -> Result<f64> {
    let loglik = |e: f64| -> f64 {
        y.iter()
            .zip(o)
            .zip(h)
            .map(|((yi, oi), hi)| {
                let eta = oi + e * hi;
                // ln expit(eta) = −ln(1 + e^{−eta}), stable on both tails
                if *yi == 1.0 {
                    -softplus(-eta)
                } else {
                    -softplus(eta)
                }
            })
            .sum()
    };
    let mut eps = 0.0;
    let mut ll = loglik(eps);
    for _ in 0..200 {
        let (mut score, mut info) = (0.0, 0.0);
        for ((yi, oi), hi) in y.iter().zip(o).zip(h) {
            let p = expit(oi + eps * hi);
            score += hi * (yi - p);
            info += hi * hi * p * (1.0 - p);
        }
        if info <= 0.0 || !info.is_finite() {
            return Err(Error::Fluctuation(
                "logistic fluctuation has no curvature".into(),
            ));
        }
        let mut step = score / info;
        let mut next = loglik(eps + step);
        let mut halvings = 0;
        while (next.is_nan() || next < ll - 1e-12 * ll.abs()) && halvings < 60 {
            step *= 0.5;
            next = loglik(eps + step);
            halvings += 1;
        }
        eps += step;
        ll = next;
        if step.abs() <= 1e-13 * (1.0 + eps.abs()) {
            return Ok(eps);
        }
    }
    Err(Error::Fluctuation(
        "logistic fluctuation did not converge".into(),
    ))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Combine the two level estimates `(x, x′)` into the requested contrast.
pub fn assemble_contrast(m1: &LevelMean, m0: &LevelMean, kind: ContrastKind) -> Result<ModelEstimate> {
    if m1.eif.len() != m0.eif.len() {
        return Err(Error::DimensionMismatch {
            what: "influence values",
            expected: m1.eif.len(),
            found: m0.eif.len(),
        });
    }
    let (delta_hat, eif): (f64, Vec<f64>) = match kind {
        ContrastKind::Difference => (
            m1.mean - m0.mean,
            m1.eif.iter().zip(&m0.eif).map(|(a, b)| a - b).collect(),
        ),
        ContrastKind::Ratio => {
            if m0.mean <= 0.0 {
                return Err(Error::UndefinedContrast(format!(
                    "ratio with reference mean {}",
                    m0.mean
                )));
            }
            let r = m1.mean / m0.mean;
            (
                r,
                m1.eif
                    .iter()
                    .zip(&m0.eif)
                    .map(|(a, b)| a / m0.mean - r * b / m0.mean)
                    .collect(),
            )
        }
    };
    Ok(ModelEstimate {
        delta_hat,
        variance: eif_variance(&eif),
        epsilon: vec![m1.epsilon, m0.epsilon],
        level_means: vec![m1.mean, m0.mean],
        truncated: m1.truncated + m0.truncated,
        out_of_range: m1.out_of_range + m0.out_of_range,
        eif,
    })
}

/// TMLE of the contrast for adjustment set `set`, with influence-function variance.
pub fn estimate(data: &Dataset, set: &AdjustmentSet, contrast: &Contrast) -> Result<ModelEstimate> {
    contrast.validate(data)?;
    let fits = fit_nuisance(data, set)?;
    match (data.outcome_type(), data.exposure_type()) {
        (VarType::Continuous, VarType::Continuous) => cont_cont_with(data, &fits),
        (_, VarType::Binary) => {
            let m1 = binx_with(data, set, &fits, true)?;
            let m0 = binx_with(data, set, &fits, false)?;
            assemble_contrast(&m1, &m0, contrast.kind)
        }
        (VarType::Binary, VarType::Continuous) => {
            let (x, xp) = contrast.levels.ok_or_else(|| {
                Error::InvalidInput("exposure levels required".into())
            })?;
            let m1 = bin_cont_with(data, set, &fits, x)?;
            let m0 = bin_cont_with(data, set, &fits, xp)?;
            assemble_contrast(&m1, &m0, contrast.kind)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapVariance {
    pub variance: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Nonparametric bootstrap variance of the TMLE on a fixed adjustment set.
pub fn bootstrap_variance(
    data: &Dataset,
    set: &AdjustmentSet,
    contrast: &Contrast,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapVariance> {
    if replicates < 2 {
        return Err(Error::InvalidInput(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    contrast.validate(data)?;
    let n = data.n();
    let draws = par::map_range(replicates, |b| {
        let mut r = rng::stream(seed, b as u64);
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        estimate(&data.resample(&idx), set, contrast)
            .ok()
            .map(|e| e.delta_hat)
            .filter(|d| d.is_finite())
    });
    let ok: Vec<f64> = draws.into_iter().flatten().collect();
    let failures = replicates - ok.len();
    if failures as f64 > MAX_BOOTSTRAP_FAILURE * replicates as f64 || ok.len() < 2 {
        return Err(Error::Variance(format!(
            "{failures} of {replicates} bootstrap replicates failed for model {set}"
        )));
    }
    if failures > 0 {
        warn!("{failures} of {replicates} bootstrap replicates failed for model {set}");
    }
    Ok(BootstrapVariance {
        variance: sample_variance(&ok),
        replicates,
        failures,
    })
}
