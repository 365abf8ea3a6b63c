//! Generalized linear models fitted by iteratively reweighted least squares.
//!
//! Two families are supported: Gaussian with identity link and Bernoulli with
//! logit link. Fits accept an optional offset and per-row prior weights, which
//! is all the targeting steps need.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{weighted_cross, weighted_gram, Cholesky};

/// Fitted probabilities are kept inside `[PROB_CLAMP, 1 − PROB_CLAMP]` during IRLS.
pub const PROB_CLAMP: f64 = 1e-10;
/// Logistic fits with any |coefficient| above this are flagged as not converged.
pub const MAX_LOGIT_COEF: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianIdentity,
    BernoulliLogit,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::BernoulliLogit => expit(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions<'a> {
    pub offset: Option<&'a [f64]>,
    pub weights: Option<&'a [f64]>,
    /// Starting coefficients for IRLS (logistic only).
    pub start: Option<&'a [f64]>,
    pub max_iter: usize,
    /// Relative log-likelihood change that ends IRLS.
    pub tol: f64,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        Self {
            offset: None,
            weights: None,
            start: None,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub fitted_values: Vec<f64>,
    pub log_likelihood: f64,
    /// Gaussian residual variance (MLE, divisor n); 1 for Bernoulli.
    pub dispersion: f64,
    pub n_params: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl GlmFit {
    /// BIC approximation of log P(data | model).
    pub fn log_marginal_bic(&self, n: usize) -> f64 {
        log_marginal_bic(self.log_likelihood, self.n_params, n)
    }
}

/// `log_likelihood − (n_params / 2)·ln(n)`.
pub fn log_marginal_bic(log_likelihood: f64, n_params: usize, n: usize) -> f64 {
    if n_params == 0 {
        return log_likelihood;
    }
    log_likelihood - 0.5 * n_params as f64 * (n as f64).ln()
}

pub fn fit_glm(design: &DMatrix<f64>, response: &[f64], family: Family) -> Result<GlmFit> {
    fit_glm_with(design, response, family, &FitOptions::default())
}

pub fn fit_glm_with(
    design: &DMatrix<f64>,
    response: &[f64],
    family: Family,
    opts: &FitOptions<'_>,
) -> Result<GlmFit> {
    let n = design.nrows();
    let p = design.ncols();
    if response.len() != n {
        return Err(Error::DimensionMismatch {
            what: "response length",
            expected: n,
            found: response.len(),
        });
    }
    for (what, v) in [("offset length", opts.offset), ("weights length", opts.weights)] {
        if let Some(v) = v {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: v.len(),
                });
            }
        }
    }
    if n < p {
        return Err(Error::InvalidInput(format!(
            "{n} observations cannot identify {p} coefficients"
        )));
    }
    match family {
        Family::GaussianIdentity => fit_gaussian(design, response, opts),
        Family::BernoulliLogit => {
            if let Some(i) = response.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidInput(format!(
                    "logistic response must be 0/1, row {} is {}",
                    i + 1,
                    response[i]
                )));
            }
            fit_logistic(design, response, opts)
        }
    }
}

fn linear_predictor(design: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&[f64]>) -> Vec<f64> {
    let eta = design * beta;
    match offset {
        Some(o) => eta.iter().zip(o).map(|(a, b)| a + b).collect(),
        None => eta.iter().copied().collect(),
    }
}

fn fit_gaussian(design: &DMatrix<f64>, y: &[f64], opts: &FitOptions<'_>) -> Result<GlmFit> {
    let n = design.nrows();
    let target: Vec<f64> = match opts.offset {
        Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
        None => y.to_vec(),
    };
    let gram = weighted_gram(design, opts.weights);
    let chol = Cholesky::factor(&gram)?;
    let beta = chol.solve(&weighted_cross(design, opts.weights, &target));
    let fitted = linear_predictor(design, &beta, opts.offset);
    let (wss, wsum) = match opts.weights {
        Some(w) => y
            .iter()
            .zip(&fitted)
            .zip(w)
            .fold((0.0, 0.0), |(s, t), ((a, b), c)| (s + c * (a - b).powi(2), t + c)),
        None => (
            y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum(),
            n as f64,
        ),
    };
    let sigma2 = (wss / wsum).max(1e-300);
    let log_likelihood = -0.5 * wsum * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let se = chol
        .inverse_diagonal()
        .into_iter()
        .map(|d| (sigma2 * d).sqrt())
        .collect();
    Ok(GlmFit {
        family: Family::GaussianIdentity,
        coefficients: beta.iter().copied().collect(),
        standard_errors: se,
        fitted_values: fitted,
        log_likelihood,
        dispersion: sigma2,
        n_params: design.ncols(),
        converged: true,
        iterations: 1,
    })
}

fn bernoulli_loglik(y: &[f64], mu: &[f64], w: Option<&[f64]>) -> f64 {
    let term = |yi: f64, m: f64| {
        let m = m.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if yi == 1.0 {
            m.ln()
        } else {
            (1.0 - m).ln()
        }
    };
    match w {
        Some(w) => y
            .iter()
            .zip(mu)
            .zip(w)
            .map(|((a, b), c)| c * term(*a, *b))
            .sum(),
        None => y.iter().zip(mu).map(|(a, b)| term(*a, *b)).sum(),
    }
}

fn fit_logistic(design: &DMatrix<f64>, y: &[f64], opts: &FitOptions<'_>) -> Result<GlmFit> {
    let n = design.nrows();
    let p = design.ncols();
    let mut beta = match opts.start {
        Some(s) if s.len() == p => DVector::from_column_slice(s),
        Some(s) => {
            return Err(Error::DimensionMismatch {
                what: "starting coefficients",
                expected: p,
                found: s.len(),
            })
        }
        None => DVector::zeros(p),
    };
    let mu_of = |eta: &[f64]| -> Vec<f64> {
        eta.iter()
            .map(|&e| expit(e).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
            .collect()
    };
    let mut eta = linear_predictor(design, &beta, opts.offset);
    let mut mu = mu_of(&eta);
    let mut ll = bernoulli_loglik(y, &mu, opts.weights);
    let mut converged = false;
    let mut iterations = 0;
    let mut work = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut last_chol = None;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        for i in 0..n {
            let v = mu[i] * (1.0 - mu[i]);
            let off = opts.offset.map_or(0.0, |o| o[i]);
            work[i] = v * opts.weights.map_or(1.0, |w| w[i]);
            z[i] = eta[i] - off + (y[i] - mu[i]) / v;
        }
        let gram = weighted_gram(design, Some(&work));
        let chol = Cholesky::factor(&gram)?;
        let mut next = chol.solve(&weighted_cross(design, Some(&work), &z));

        let mut next_eta = linear_predictor(design, &next, opts.offset);
        let mut next_mu = mu_of(&next_eta);
        let mut next_ll = bernoulli_loglik(y, &next_mu, opts.weights);
        let mut halvings = 0;
        while (!next_ll.is_finite() || next_ll < ll - 1e-10 * ll.abs()) && halvings < 30 {
            next = (&next + &beta) * 0.5;
            next_eta = linear_predictor(design, &next, opts.offset);
            next_mu = mu_of(&next_eta);
            next_ll = bernoulli_loglik(y, &next_mu, opts.weights);
            halvings += 1;
        }
        let change = (next_ll - ll).abs();
        beta = next;
        eta = next_eta;
        mu = next_mu;
        ll = next_ll;
        last_chol = Some(chol);
        if change < opts.tol * (ll.abs() + 0.1) {
            converged = true;
            break;
        }
    }

    // Information from the last iteration; at convergence it differs from the
    // information at the final coefficients by less than the tolerance.
    let se = match last_chol {
        Some(chol) => chol.inverse_diagonal().into_iter().map(f64::sqrt).collect(),
        None => vec![f64::INFINITY; p],
    };
    // Under separation the likelihood flattens while coefficients keep
    // growing, so predictions pinned at the clamp mark the fit as failed.
    let pinned = mu.iter().enumerate().any(|(i, m)| {
        (*m <= PROB_CLAMP || *m >= 1.0 - PROB_CLAMP) && opts.weights.is_none_or(|w| w[i] > 0.0)
    });
    if pinned {
        converged = false;
    }
    if beta.iter().any(|b| b.abs() > MAX_LOGIT_COEF || !b.is_finite()) {
        converged = false;
    }
    let fitted = mu;
    Ok(GlmFit {
        family: Family::BernoulliLogit,
        coefficients: beta.iter().copied().collect(),
        standard_errors: se,
        fitted_values: fitted,
        log_likelihood: ll,
        dispersion: 1.0,
        n_params: p,
        converged,
        iterations,
    })
}

/// `g⁻¹(design · coefficients)`.
pub fn predict(fit: &GlmFit, design: &DMatrix<f64>) -> Result<Vec<f64>> {
    if design.ncols() != fit.coefficients.len() {
        return Err(Error::DimensionMismatch {
            what: "design columns",
            expected: fit.coefficients.len(),
            found: design.ncols(),
        });
    }
    let beta = DVector::from_column_slice(&fit.coefficients);
    Ok((design * beta)
        .iter()
        .map(|&e| fit.family.inverse_link(e))
        .collect())
}

/// Summary of a fit restricted to a subset of candidate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetFit {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub converged: bool,
}

impl SubsetFit {
    pub fn log_marginal_bic(&self, n: usize) -> f64 {
        log_marginal_bic(self.log_likelihood, self.n_params, n)
    }
}

/// Sufficient statistics for Gaussian least squares on any column subset.
///
/// Model search refits thousands of nested designs; with `ZᵀZ`, `Zᵀy` and
/// `yᵀy` cached each refit costs `O(p³)` instead of `O(n p²)`.
#[derive(Debug, Clone)]
pub struct GaussianGram {
    n: usize,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    yy: f64,
}

impl GaussianGram {
    pub fn new(columns: &DMatrix<f64>, response: &[f64]) -> Self {
        Self {
            n: columns.nrows(),
            gram: weighted_gram(columns, None),
            cross: weighted_cross(columns, None, response),
            yy: response.iter().map(|v| v * v).sum(),
        }
    }

    pub fn fit_subset(&self, cols: &[usize]) -> Result<SubsetFit> {
        let q = cols.len();
        let sub = DMatrix::from_fn(q, q, |i, j| self.gram[(cols[i], cols[j])]);
        let rhs = DVector::from_fn(q, |i, _| self.cross[cols[i]]);
        let chol = Cholesky::factor(&sub).map_err(|e| match e {
            Error::RankDeficient { column } => Error::RankDeficient {
                column: cols[column],
            },
            other => other,
        })?;
        let beta = chol.solve(&rhs);
        let n = self.n as f64;
        let rss = (self.yy - beta.dot(&rhs)).max(0.0);
        let sigma2 = (rss / n).max(1e-300);
        let log_likelihood = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
        Ok(SubsetFit {
            coefficients: beta.iter().copied().collect(),
            standard_errors: chol
                .inverse_diagonal()
                .into_iter()
                .map(|d| (sigma2 * d).sqrt())
                .collect(),
            log_likelihood,
            n_params: q,
            converged: true,
        })
    }
}

/// Fits models on column subsets of a fixed candidate design.
#[derive(Debug, Clone)]
pub enum SubsetFitter {
    Gaussian(GaussianGram),
    Logistic {
        columns: DMatrix<f64>,
        response: Vec<f64>,
    },
}

impl SubsetFitter {
    pub fn new(columns: DMatrix<f64>, response: &[f64], family: Family) -> Self {
        match family {
            Family::GaussianIdentity => Self::Gaussian(GaussianGram::new(&columns, response)),
            Family::BernoulliLogit => Self::Logistic {
                columns,
                response: response.to_vec(),
            },
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.n,
            Self::Logistic { columns, .. } => columns.nrows(),
        }
    }

    /// Fit on `cols`; `start` is an optional warm start aligned with `cols`.
    pub fn fit(&self, cols: &[usize], start: Option<&[f64]>) -> Result<SubsetFit> {
        match self {
            Self::Gaussian(g) => g.fit_subset(cols),
            Self::Logistic { columns, response } => {
                let design = columns.select_columns(cols);
                let opts = FitOptions {
                    start,
                    ..FitOptions::default()
                };
                let fit = fit_glm_with(&design, response, Family::BernoulliLogit, &opts)
                    .map_err(|e| match e {
                        Error::RankDeficient { column } => Error::RankDeficient {
                            column: cols[column],
                        },
                        other => other,
                    })?;
                Ok(SubsetFit {
                    coefficients: fit.coefficients,
                    standard_errors: fit.standard_errors,
                    log_likelihood: fit.log_likelihood,
                    n_params: fit.n_params,
                    converged: fit.converged,
                })
            }
        }
    }
}
