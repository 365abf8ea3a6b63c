//! Reference estimators for a binary exposure on a fixed adjustment set:
//! parametric g-formula and augmented inverse probability weighting.

use serde::{Deserialize, Serialize};

use crate::data::{sample_variance, Dataset, VarType};
use crate::error::{Error, Result};
use crate::exposure_bma::exposure_family;
use crate::glm::{fit_glm, predict, GlmFit};
use crate::linalg::{weighted_gram, Cholesky};
use crate::model_space::AdjustmentSet;
use crate::outcome_mc3::outcome_family;
use crate::tmle::{ContrastKind, PROPENSITY_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Gformula,
    Aipw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub delta_hat: f64,
    /// Absent for the g-formula with a binary outcome.
    pub variance: Option<f64>,
    pub estimator: Estimator,
    pub set: AdjustmentSet,
}

fn require_binary_exposure(data: &Dataset) -> Result<()> {
    if data.exposure_type() != VarType::Binary {
        return Err(Error::InvalidInput(
            "benchmark estimators need a binary exposure".into(),
        ));
    }
    Ok(())
}

fn outcome_fit(data: &Dataset, set: &AdjustmentSet) -> Result<GlmFit> {
    let fit = fit_glm(&data.outcome_design(set), data.y(), outcome_family(data))?;
    if !fit.converged {
        return Err(Error::Estimation(format!(
            "outcome model {set} did not converge"
        )));
    }
    Ok(fit)
}

fn counterfactual_predictions(data: &Dataset, set: &AdjustmentSet, fit: &GlmFit) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        predict(fit, &data.outcome_design_at(set, 1.0))?,
        predict(fit, &data.outcome_design_at(set, 0.0))?,
    ))
}

fn contrast_of(m1: f64, m0: f64, kind: ContrastKind) -> Result<f64> {
    match kind {
        ContrastKind::Difference => Ok(m1 - m0),
        ContrastKind::Ratio if m0 > 0.0 => Ok(m1 / m0),
        ContrastKind::Ratio => Err(Error::UndefinedContrast(format!(
            "ratio with reference mean {m0}"
        ))),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// HC0 sandwich variance of coefficient `k` of a least-squares fit.
fn hc0_variance(design: &nalgebra::DMatrix<f64>, residuals: &[f64], k: usize) -> Result<f64> {
    let bread = Cholesky::factor(&weighted_gram(design, None))?.inverse();
    let e2: Vec<f64> = residuals.iter().map(|e| e * e).collect();
    let meat = weighted_gram(design, Some(&e2));
    let row = bread.row(k);
    Ok((row * meat * row.transpose())[(0, 0)])
}

/// Standardization plug-in `n⁻¹ Σ (Ê[Y|X=1,U_i] − Ê[Y|X=0,U_i])`.
pub fn gformula(data: &Dataset, set: &AdjustmentSet, kind: ContrastKind) -> Result<BenchmarkResult> {
    require_binary_exposure(data)?;
    if kind == ContrastKind::Ratio && data.outcome_type() != VarType::Binary {
        return Err(Error::InvalidInput("ratio contrasts need a binary outcome".into()));
    }
    let fit = outcome_fit(data, set)?;
    let (q1, q0) = counterfactual_predictions(data, set, &fit)?;
    let delta_hat = contrast_of(mean(&q1), mean(&q0), kind)?;
    let variance = match data.outcome_type() {
        VarType::Binary => None,
        VarType::Continuous => {
            let resid: Vec<f64> = data
                .y()
                .iter()
                .zip(&fit.fitted_values)
                .map(|(y, f)| y - f)
                .collect();
            Some(hc0_variance(&data.outcome_design(set), &resid, 1)?)
        }
    };
    Ok(BenchmarkResult {
        delta_hat,
        variance,
        estimator: Estimator::Gformula,
        set: set.clone(),
    })
}

/// Per-row AIPW contributions to `E[Y^1]` and `E[Y^0]`, with the outcome
/// predictions `(q1, q0)` supplied by the caller.
pub fn aipw_contributions(data: &Dataset, p1: &[f64], q1: &[f64], q0: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a1 = Vec::with_capacity(data.n());
    let mut a0 = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let p = p1[i].clamp(PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR);
        let (x, y) = (data.x()[i], data.y()[i]);
        a1.push(x / p * (y - q1[i]) + q1[i]);
        a0.push((1.0 - x) / (1.0 - p) * (y - q0[i]) + q0[i]);
    }
    (a1, a0)
}

/// Augmented inverse probability weighting with influence-function variance.
pub fn aipw(data: &Dataset, set: &AdjustmentSet, kind: ContrastKind) -> Result<BenchmarkResult> {
    require_binary_exposure(data)?;
    if kind == ContrastKind::Ratio && data.outcome_type() != VarType::Binary {
        return Err(Error::InvalidInput("ratio contrasts need a binary outcome".into()));
    }
    let fit = outcome_fit(data, set)?;
    let (q1, q0) = counterfactual_predictions(data, set, &fit)?;
    let ps = fit_glm(&data.exposure_design(set), data.x(), exposure_family(data))?;
    if !ps.converged {
        log::warn!("propensity model {set} did not converge; using its last iterate");
    }
    let (a1, a0) = aipw_contributions(data, &ps.fitted_values, &q1, &q0);
    let (m1, m0) = (mean(&a1), mean(&a0));
    let delta_hat = contrast_of(m1, m0, kind)?;
    let phi: Vec<f64> = match kind {
        ContrastKind::Difference => a1.iter().zip(&a0).map(|(a, b)| a - b).collect(),
        ContrastKind::Ratio => a1
            .iter()
            .zip(&a0)
            .map(|(a, b)| a / m0 - m1 * b / (m0 * m0))
            .collect(),
    };
    Ok(BenchmarkResult {
        delta_hat,
        variance: Some(sample_variance(&phi) / data.n() as f64),
        estimator: Estimator::Aipw,
        set: set.clone(),
    })
}
