//! Adjustment sets and the confounder-targeting prior over outcome models.
//!
//! The prior on covariate `m` entering the outcome model depends on whether
//! `m` predicts the exposure and on how strongly it predicts the outcome:
//!
//! ```text
//! P(αʸ_m = 1 | αˣ_m = 0) = P(αʸ_m = 0 | αˣ_m = 0) = 1/2
//! P(αʸ_m = 1 | αˣ_m = 1) = ω_m / (ω_m + 1)
//! P(αʸ_m = 0 | αˣ_m = 1) = 1 / (ω_m + 1)
//! ω_m = ω · (δ̃_m σ_{U_m} / σ_Y)²
//! ```
//!
//! `δ̃_m` is only known up to its sampling error, so the component is averaged
//! over `N(δ̂_m, SE²)`. Since `1/(ω_m + 1)` is a Lorentzian in `δ̃_m`, the
//! average is a Voigt profile and has a closed form through the Faddeeva
//! function. Gauss–Hermite quadrature is available as an alternative; it
//! needs many nodes once the standard error is wider than the Lorentzian.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use num_complex::Complex64;

use crate::data::{mean_sd_mle, Dataset, VarType};
use crate::error::{Error, Result};

/// Inclusion indicator over the `M` candidate covariates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdjustmentSet {
    bits: Vec<bool>,
}

impl AdjustmentSet {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn empty(m: usize) -> Self {
        Self {
            bits: vec![false; m],
        }
    }

    pub fn full(m: usize) -> Self {
        Self {
            bits: vec![true; m],
        }
    }

    /// Set containing exactly the (0-based) indices in `idx`.
    pub fn from_indices(m: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(m);
        for i in idx {
            s.bits[i] = true;
        }
        s
    }

    /// Decode the `k`-th of the `2^M` sets (bit `m` of `k` is covariate `m`).
    pub fn from_index(m: usize, k: u64) -> Self {
        Self {
            bits: (0..m).map(|i| (k >> i) & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn contains(&self, m: usize) -> bool {
        self.bits[m]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn included(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
    }

    /// Position of covariate `m` among the included covariates.
    pub fn rank_of(&self, m: usize) -> Option<usize> {
        self.bits[m].then(|| self.bits[..m].iter().filter(|b| **b).count())
    }

    pub fn with(&self, m: usize, value: bool) -> Self {
        let mut bits = self.bits.clone();
        bits[m] = value;
        Self { bits }
    }

    pub fn flipped(&self, m: usize) -> Self {
        self.with(m, !self.bits[m])
    }

    /// The `M` sets at Hamming distance one.
    pub fn neighbors(&self) -> Vec<AdjustmentSet> {
        (0..self.len()).map(|m| self.flipped(m)).collect()
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

impl fmt::Display for AdjustmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for AdjustmentSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidInput(format!(
                    "adjustment set bit must be 0 or 1, found `{other}`"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bits)
    }
}

impl Serialize for AdjustmentSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AdjustmentSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Gauss–Hermite rule for `∫ e^{-x²} f(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("quadrature needs at least one node".into()));
        }
        const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(Z)]` for `Z ~ N(mean, sd²)`.
    pub fn expect_normal(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mean + scale * x))
            .sum();
        s / std::f64::consts::PI.sqrt()
    }
}

pub const DEFAULT_QUADRATURE_NODES: usize = 20;

/// How the sampling uncertainty of `δ̃_m` is integrated out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaIntegral {
    #[default]
    Exact,
    GaussHermite { nodes: usize },
}

impl DeltaIntegral {
    pub fn gauss_hermite() -> Self {
        DeltaIntegral::GaussHermite {
            nodes: DEFAULT_QUADRATURE_NODES,
        }
    }
}

/// Hyperparameters and scale estimates entering `ω_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub omega: f64,
    pub sigma_u: Vec<f64>,
    pub sigma_y: f64,
    quadrature: Option<GaussHermite>,
}

impl PriorConfig {
    pub fn new(omega: f64, sigma_u: Vec<f64>, sigma_y: f64, integral: DeltaIntegral) -> Result<Self> {
        if !omega.is_finite() || omega < 0.0 {
            return Err(Error::InvalidInput(format!("omega must be finite and ≥ 0, got {omega}")));
        }
        if sigma_y.is_nan() || sigma_y <= 0.0 || sigma_u.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::InvalidInput(
                "standard deviations must be positive; a covariate or the outcome is constant".into(),
            ));
        }
        Ok(Self {
            omega,
            sigma_u,
            sigma_y,
            quadrature: match integral {
                DeltaIntegral::Exact => None,
                DeltaIntegral::GaussHermite { nodes } => Some(GaussHermite::new(nodes)?),
            },
        })
    }

    /// Scale estimates from the data (MLE SDs; `σ_Y = 1` for a binary outcome).
    pub fn from_data(data: &Dataset, omega: f64, integral: DeltaIntegral) -> Result<Self> {
        let sigma_u = (0..data.m()).map(|m| mean_sd_mle(data.covariate(m)).1).collect();
        let sigma_y = match data.outcome_type() {
            VarType::Binary => 1.0,
            VarType::Continuous => mean_sd_mle(data.y()).1,
        };
        Self::new(omega, sigma_u, sigma_y, integral)
    }

    pub fn integral(&self) -> DeltaIntegral {
        match &self.quadrature {
            None => DeltaIntegral::Exact,
            Some(q) => DeltaIntegral::GaussHermite { nodes: q.len() },
        }
    }
}

/// `ω = c · n^b`.
pub fn default_omega(n: usize, c: f64, b: f64) -> f64 {
    c * (n as f64).powf(b)
}

/// `ω_m = ω · (δ̃ σ_{U_m} / σ_Y)²`.
pub fn omega_term(delta_tilde: f64, m: usize, cfg: &PriorConfig) -> f64 {
    let scaled = delta_tilde * cfg.sigma_u[m] / cfg.sigma_y;
    cfg.omega * scaled * scaled
}

/// `P(αʸ_m = alpha_y | αˣ_m = alpha_x)`.
pub fn prior_inclusion_prob(alpha_y: bool, alpha_x: bool, omega_m: f64) -> f64 {
    match (alpha_y, alpha_x) {
        (_, false) => 0.5,
        (true, true) => {
            if omega_m.is_infinite() {
                1.0
            } else {
                omega_m / (omega_m + 1.0)
            }
        }
        (false, true) => 1.0 / (omega_m + 1.0),
    }
}

/// `Σ_{αˣ_m} P(αʸ_m | αˣ_m) P(αˣ_m)` with `P(αˣ_m = 1) = π_m`.
pub fn marginal_prior_component(alpha_y: bool, pi_m: f64, omega_m: f64) -> f64 {
    prior_inclusion_prob(alpha_y, true, omega_m) * pi_m
        + prior_inclusion_prob(alpha_y, false, omega_m) * (1.0 - pi_m)
}

/// Marginal prior component averaged over `δ̃_m ~ N(delta_hat, delta_se²)`.
pub fn integrated_prior_component(
    delta_hat: f64,
    delta_se: f64,
    pi_m: f64,
    m: usize,
    alpha_y: bool,
    cfg: &PriorConfig,
) -> f64 {
    if pi_m == 0.0 {
        return 0.5;
    }
    if let Some(q) = &cfg.quadrature {
        return q.expect_normal(delta_hat, delta_se, |d| {
            marginal_prior_component(alpha_y, pi_m, omega_term(d, m, cfg))
        });
    }
    let a = cfg.omega * (cfg.sigma_u[m] / cfg.sigma_y).powi(2);
    // P(αʸ_m = 0 | αˣ_m = 1) averaged over δ̃
    let g = expected_lorentzian(delta_hat, delta_se, a);
    let excluded = pi_m * g + 0.5 * (1.0 - pi_m);
    if alpha_y {
        1.0 - excluded
    } else {
        excluded
    }
}

/// `E[1 / (1 + a D²)]` for `D ~ N(mean, sd²)`. With `γ = a^{-1/2}` this is
/// `γ √(π/2) / sd · Re w((mean + iγ) / (sd √2))`, `w` the Faddeeva function.
pub fn expected_lorentzian(mean: f64, sd: f64, a: f64) -> f64 {
    if a <= 0.0 {
        return 1.0;
    }
    if sd.is_nan() || sd <= 0.0 || !sd.is_finite() {
        return 1.0 / (1.0 + a * mean * mean);
    }
    let gamma = a.sqrt().recip();
    let scale = sd * std::f64::consts::SQRT_2;
    let w = errorfunctions::w_with_relerror(Complex64::new(mean / scale, gamma / scale), 0.0);
    let v = gamma / sd * (std::f64::consts::PI / 2.0).sqrt() * w.re;
    v.clamp(0.0, 1.0)
}
