//! Observational dataset: outcome, exposure and candidate confounders.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_space::AdjustmentSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarType {
    Continuous,
    Binary,
}

/// Outcome `Y`, exposure `X` and an `n × M` covariate matrix `U`.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    x: Vec<f64>,
    u: DMatrix<f64>,
    outcome_type: VarType,
    exposure_type: VarType,
    covariate_names: Vec<String>,
}

fn check_column(name: &str, values: &[f64], kind: VarType) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "column `{name}` row {}: non-finite value",
                i + 1
            )));
        }
        if kind == VarType::Binary && *v != 0.0 && *v != 1.0 {
            return Err(Error::InvalidInput(format!(
                "column `{name}` row {}: binary variable must be 0 or 1, found {v}",
                i + 1
            )));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        u: DMatrix<f64>,
        outcome_type: VarType,
        exposure_type: VarType,
    ) -> Result<Self> {
        let names = (1..=u.ncols()).map(|m| format!("U{m}")).collect();
        Self::with_names(y, x, u, outcome_type, exposure_type, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        x: Vec<f64>,
        u: DMatrix<f64>,
        outcome_type: VarType,
        exposure_type: VarType,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                what: "exposure length",
                expected: n,
                found: x.len(),
            });
        }
        if u.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "covariate rows",
                expected: n,
                found: u.nrows(),
            });
        }
        if covariate_names.len() != u.ncols() {
            return Err(Error::DimensionMismatch {
                what: "covariate names",
                expected: u.ncols(),
                found: covariate_names.len(),
            });
        }
        if n < 2 {
            return Err(Error::InvalidInput("need at least two observations".into()));
        }
        check_column("outcome", &y, outcome_type)?;
        check_column("exposure", &x, exposure_type)?;
        for (m, name) in covariate_names.iter().enumerate() {
            check_column(name, u.column(m).as_slice(), VarType::Continuous)?;
        }
        Ok(Self {
            y,
            x,
            u,
            outcome_type,
            exposure_type,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of candidate covariates `M`.
    pub fn m(&self) -> usize {
        self.u.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn covariate(&self, m: usize) -> &[f64] {
        let n = self.n();
        &self.u.as_slice()[m * n..(m + 1) * n]
    }

    pub fn outcome_type(&self) -> VarType {
        self.outcome_type
    }

    pub fn exposure_type(&self) -> VarType {
        self.exposure_type
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Exposure-model design `[1, U_set]`.
    pub fn exposure_design(&self, set: &AdjustmentSet) -> DMatrix<f64> {
        self.design_with(set, None)
    }

    /// Outcome-model design `[1, X, U_set]` with the observed exposure.
    pub fn outcome_design(&self, set: &AdjustmentSet) -> DMatrix<f64> {
        self.design_with(set, Some(&self.x))
    }

    /// Outcome-model design with the exposure column set to the constant `level`.
    pub fn outcome_design_at(&self, set: &AdjustmentSet, level: f64) -> DMatrix<f64> {
        let mut d = self.outcome_design(set);
        d.column_mut(1).fill(level);
        d
    }

    fn design_with(&self, set: &AdjustmentSet, exposure: Option<&[f64]>) -> DMatrix<f64> {
        let n = self.n();
        let included: Vec<usize> = set.included().collect();
        let p = 1 + usize::from(exposure.is_some()) + included.len();
        let mut data = Vec::with_capacity(n * p);
        data.extend(std::iter::repeat_n(1.0, n));
        if let Some(x) = exposure {
            data.extend_from_slice(x);
        }
        for m in included {
            data.extend_from_slice(self.covariate(m));
        }
        DMatrix::from_vec(n, p, data)
    }

    /// Rows `idx` (with repetition) as a new dataset.
    pub fn resample(&self, idx: &[usize]) -> Self {
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let x = idx.iter().map(|&i| self.x[i]).collect();
        let u = DMatrix::from_fn(idx.len(), self.m(), |r, c| self.u[(idx[r], c)]);
        Self {
            y,
            x,
            u,
            outcome_type: self.outcome_type,
            exposure_type: self.exposure_type,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Mean and maximum-likelihood standard deviation (divisor `n`).
pub fn mean_sd_mle(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sample variance with divisor `n − 1`.
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}
