//! Simulation scenarios, replication harness and summary metrics.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::benchmarks::{aipw, gformula};
use crate::data::{Dataset, VarType};
use crate::error::{Error, Result};
use crate::estimate::{estimate, GbceeConfig};
use crate::glm::expit;
use crate::model_space::AdjustmentSet;
use crate::rng::{derive_seed, stream, SimRng};
use crate::tmle::ContrastKind;
use crate::par;

/// Failure rate above which an estimator is flagged in the metrics.
pub const FAILURE_FLAG_RATE: f64 = 0.1;
/// Sample size used for Monte Carlo true effects.
pub const TRUE_EFFECT_DRAWS: usize = 1_000_000;
const Z_975: f64 = 1.959_963_984_540_054;
/// Coefficient on `(U₁ + … + U₅)²` in Scenarios 4, 5 and 4B. At 1.0 the
/// Scenario 4B risk difference is about 0.0229; a double sum with 0.5 per
/// `UᵢUⱼ` term is the same as 0.5 here.
pub const INTERACTION_COEF: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
    S5,
    S2B,
    S4B,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::S1,
        Scenario::S2,
        Scenario::S3,
        Scenario::S4,
        Scenario::S5,
        Scenario::S2B,
        Scenario::S4B,
    ];

    pub fn m(self) -> usize {
        match self {
            Scenario::S1 => 40,
            Scenario::S2 | Scenario::S2B => 20,
            Scenario::S3 => 100,
            Scenario::S4 | Scenario::S5 | Scenario::S4B => 5,
        }
    }

    pub fn outcome_type(self) -> VarType {
        match self {
            Scenario::S2B | Scenario::S4B => VarType::Binary,
            _ => VarType::Continuous,
        }
    }

    pub fn exposure_type(self) -> VarType {
        VarType::Binary
    }

    /// Pure outcome predictors and true confounders.
    pub fn target_set(self) -> AdjustmentSet {
        let k = match self {
            Scenario::S1 => 10,
            Scenario::S2 | Scenario::S2B | Scenario::S3 => 4,
            Scenario::S4 | Scenario::S4B => 5,
            Scenario::S5 => 3,
        };
        AdjustmentSet::from_indices(self.m(), 0..k)
    }

    pub fn default_n(self) -> usize {
        1000
    }

    /// Comparator for the relative RMSE.
    pub fn comparator(self) -> StudyEstimator {
        match self {
            Scenario::S4 | Scenario::S4B => StudyEstimator::TargetAipw,
            _ => StudyEstimator::TargetG,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::S1 => "1",
            Scenario::S2 => "2",
            Scenario::S3 => "3",
            Scenario::S4 => "4",
            Scenario::S5 => "5",
            Scenario::S2B => "2B",
            Scenario::S4B => "4B",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches(['S', 's']);
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.label().eq_ignore_ascii_case(t))
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown scenario `{s}`; valid: 1, 2, 3, 4, 5, 2B, 4B"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StudyEstimator {
    #[serde(rename = "gbcee")]
    Gbcee,
    #[serde(rename = "full-g")]
    FullG,
    #[serde(rename = "target-g")]
    TargetG,
    #[serde(rename = "full-aipw")]
    FullAipw,
    #[serde(rename = "target-aipw")]
    TargetAipw,
}

impl StudyEstimator {
    pub const ALL: [StudyEstimator; 5] = [
        StudyEstimator::FullG,
        StudyEstimator::TargetG,
        StudyEstimator::FullAipw,
        StudyEstimator::TargetAipw,
        StudyEstimator::Gbcee,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyEstimator::Gbcee => "gbcee",
            StudyEstimator::FullG => "full-g",
            StudyEstimator::TargetG => "target-g",
            StudyEstimator::FullAipw => "full-aipw",
            StudyEstimator::TargetAipw => "target-aipw",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }

    /// Whether the estimator can run on this scenario and sample size. The
    /// full AIPW is skipped when the sample is too small for an outcome and
    /// a propensity model on every covariate at once.
    pub fn applicable(self, scenario: Scenario, n: usize) -> bool {
        match self {
            StudyEstimator::FullAipw => n > 2 * (scenario.m() + 2),
            _ => true,
        }
    }
}

impl fmt::Display for StudyEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown estimator `{s}`; valid: {}",
                    Self::valid_names()
                ))
            })
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

fn bernoulli(p: f64, rng: &mut SimRng) -> f64 {
    let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
    f64::from(u8::from(Bernoulli::new(p).expect("p in [0,1]").sample(rng)))
}

/// Lower Cholesky factor of the equicorrelation matrix with unit variances.
fn equicorrelation_factor(m: usize, rho: f64) -> DMatrix<f64> {
    let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho });
    sigma
        .cholesky()
        .expect("equicorrelation matrix is positive definite")
        .l()
}

/// Rows of `mean + L z` with `z` standard normal, drawn row by row.
fn correlated_normals(n: usize, mean: f64, l: &DMatrix<f64>, rng: &mut SimRng) -> DMatrix<f64> {
    let m = l.nrows();
    let mut u = DMatrix::zeros(n, m);
    let mut z = vec![0.0; m];
    for i in 0..n {
        z.iter_mut().for_each(|v| *v = normal(rng));
        for j in 0..m {
            u[(i, j)] = mean + (0..=j).map(|k| l[(j, k)] * z[k]).sum::<f64>();
        }
    }
    u
}

fn interaction(u: &DMatrix<f64>, i: usize, coef: f64) -> f64 {
    let s: f64 = (0..5).map(|j| u[(i, j)]).sum();
    coef * s * s
}

/// Covariates of a scenario.
fn covariates(scenario: Scenario, n: usize, rng: &mut SimRng) -> DMatrix<f64> {
    match scenario {
        Scenario::S1 => {
            let mut u = DMatrix::zeros(n, 40);
            for i in 0..n {
                for j in 5..40 {
                    u[(i, j)] = normal(rng);
                }
                let s: f64 = (10..15).map(|j| u[(i, j)]).sum();
                for j in 0..5 {
                    u[(i, j)] = s + normal(rng);
                }
            }
            u
        }
        Scenario::S2 | Scenario::S2B => correlated_normals(n, 0.0, &equicorrelation_factor(20, 0.5), rng),
        Scenario::S3 => DMatrix::from_fn(n, 100, |_, _| 1.0 + 2.0 * normal(rng)),
        Scenario::S4 | Scenario::S5 | Scenario::S4B => {
            correlated_normals(n, 1.0, &equicorrelation_factor(5, 0.6), rng)
        }
    }
}

fn propensity(scenario: Scenario, u: &DMatrix<f64>, i: usize, coef: f64) -> f64 {
    let c = |j: usize| u[(i, j - 1)];
    let eta = match scenario {
        Scenario::S1 => (11..=30).map(c).sum(),
        Scenario::S2 | Scenario::S2B => c(1) + c(2) + c(5) + c(6),
        Scenario::S3 => 0.5 * c(1) - c(2) + 0.3 * c(5) - 0.3 * c(6) + 0.3 * c(7) - 0.3 * c(8),
        Scenario::S4 | Scenario::S4B => 0.5 * c(1) + 0.5 * c(2) + 0.1 * c(3),
        Scenario::S5 => -5.0 + c(3) + c(4) + c(5) + interaction(u, i, coef),
    };
    expit(eta)
}

/// Mean of `Y` given exposure level `x` (a probability for binary outcomes).
fn outcome_mean(scenario: Scenario, u: &DMatrix<f64>, i: usize, x: f64, coef: f64) -> f64 {
    let c = |j: usize| u[(i, j - 1)];
    match scenario {
        Scenario::S1 => x + 0.1 * (1..=10).map(c).sum::<f64>(),
        Scenario::S2 => 2.0 * x + 0.6 * (c(1) + c(2) + c(3) + c(4)),
        Scenario::S3 => x + 2.0 * c(1) + 0.2 * c(2) + 5.0 * c(3) + 5.0 * c(4),
        Scenario::S4 => x + c(3) + c(4) + c(5) + interaction(u, i, coef),
        Scenario::S5 => x + 0.5 * c(1) + 0.5 * c(2) + 0.1 * c(3),
        Scenario::S2B => expit(2.0 * x + 0.6 * (c(1) + c(2) + c(3) + c(4))),
        Scenario::S4B => expit(-5.0 + x + c(3) + c(4) + c(5) + interaction(u, i, coef)),
    }
}

fn outcome_sd(scenario: Scenario) -> f64 {
    match scenario {
        Scenario::S3 => 2.0,
        _ => 1.0,
    }
}

/// Draw one dataset of size `n`.
pub fn generate(scenario: Scenario, n: usize, seed: u64) -> Result<Dataset> {
    generate_with(scenario, n, seed, INTERACTION_COEF)
}

/// As [`generate`], with a different coefficient on the squared-sum term.
pub fn generate_with(scenario: Scenario, n: usize, seed: u64, interaction: f64) -> Result<Dataset> {
    let coef = interaction;
    if n < 2 {
        return Err(Error::InvalidInput("sample size must be at least 2".into()));
    }
    let mut rng = stream(seed, 0);
    let u = covariates(scenario, n, &mut rng);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi = bernoulli(propensity(scenario, &u, i, coef), &mut rng);
        let mu = outcome_mean(scenario, &u, i, xi, coef);
        let yi = match scenario.outcome_type() {
            VarType::Binary => bernoulli(mu, &mut rng),
            VarType::Continuous => mu + outcome_sd(scenario) * normal(&mut rng),
        };
        x.push(xi);
        y.push(yi);
    }
    Dataset::new(y, x, u, scenario.outcome_type(), scenario.exposure_type())
}

/// True average treatment effect. Binary-outcome scenarios are integrated by
/// Monte Carlo over `draws` covariate vectors, averaging `P(Y¹=1|U) − P(Y⁰=1|U)`.
pub fn true_effect_with(scenario: Scenario, draws: usize, seed: u64, interaction: f64) -> f64 {
    let coef = interaction;
    match scenario {
        Scenario::S2 => 2.0,
        Scenario::S1 | Scenario::S3 | Scenario::S4 | Scenario::S5 => 1.0,
        Scenario::S2B | Scenario::S4B => {
            const CHUNK: usize = 50_000;
            let chunks = draws.div_ceil(CHUNK);
            let sums = par::map_range(chunks, |c| {
                let len = CHUNK.min(draws - c * CHUNK);
                let mut rng = stream(seed, c as u64);
                let u = covariates(scenario, len, &mut rng);
                (0..len)
                    .map(|i| outcome_mean(scenario, &u, i, 1.0, coef) - outcome_mean(scenario, &u, i, 0.0, coef))
                    .sum::<f64>()
            });
            sums.iter().sum::<f64>() / draws as f64
        }
    }
}

pub fn true_effect(scenario: Scenario, seed: u64) -> f64 {
    true_effect_with(scenario, TRUE_EFFECT_DRAWS, seed, INTERACTION_COEF)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: StudyEstimator,
    pub delta_hat: Option<f64>,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Outcome-model inclusion probabilities (0/1 for fixed-set benchmarks).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub inclusion: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub estimator: StudyEstimator,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub rel_rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub inclusion_prob_mean: Vec<f64>,
    pub n_reps: usize,
    pub n_failures: usize,
    /// Failed on more than the flag rate of replications.
    pub flagged: bool,
    /// Not applicable at this sample size; no replication was attempted.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<StudyEstimator>,
    pub seed: u64,
    /// Coefficient on the squared-sum term of Scenarios 4, 5 and 4B.
    #[serde(default = "default_interaction")]
    pub interaction: f64,
    pub gbcee: GbceeConfig,
}

fn default_interaction() -> f64 {
    INTERACTION_COEF
}

impl StudyConfig {
    pub fn new(scenario: Scenario, n: usize, reps: usize, estimators: Vec<StudyEstimator>, seed: u64) -> Self {
        Self {
            scenario,
            n,
            reps,
            estimators,
            seed,
            interaction: INTERACTION_COEF,
            gbcee: GbceeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub true_effect: f64,
    pub metrics: Vec<StudyMetrics>,
    pub replications: Vec<ReplicationRecord>,
}

fn failed(replication: usize, estimator: StudyEstimator, e: &Error) -> ReplicationRecord {
    ReplicationRecord {
        replication,
        estimator,
        delta_hat: None,
        variance: None,
        ci_low: None,
        ci_high: None,
        inclusion: Vec::new(),
        error: Some(e.to_string()),
    }
}

fn record(replication: usize, estimator: StudyEstimator, delta: f64, variance: Option<f64>, inclusion: Vec<f64>) -> ReplicationRecord {
    let half = variance.map(|v| Z_975 * v.max(0.0).sqrt());
    ReplicationRecord {
        replication,
        estimator,
        delta_hat: Some(delta),
        variance,
        ci_low: half.map(|h| delta - h),
        ci_high: half.map(|h| delta + h),
        inclusion,
        error: None,
    }
}

fn set_bits(set: &AdjustmentSet) -> Vec<f64> {
    set.bits().iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// Run one estimator on one dataset.
pub fn run_estimator(
    estimator: StudyEstimator,
    data: &Dataset,
    scenario: Scenario,
    gbcee: &GbceeConfig,
    replication: usize,
) -> ReplicationRecord {
    let full = AdjustmentSet::full(data.m());
    let target = scenario.target_set();
    let out = match estimator {
        StudyEstimator::Gbcee => estimate(data, gbcee)
            .map(|r| record(replication, estimator, r.delta_hat, Some(r.variance), r.inclusion_probs_outcome)),
        StudyEstimator::FullG => gformula(data, &full, ContrastKind::Difference)
            .map(|r| record(replication, estimator, r.delta_hat, r.variance, set_bits(&full))),
        StudyEstimator::TargetG => gformula(data, &target, ContrastKind::Difference)
            .map(|r| record(replication, estimator, r.delta_hat, r.variance, set_bits(&target))),
        StudyEstimator::FullAipw => aipw(data, &full, ContrastKind::Difference)
            .map(|r| record(replication, estimator, r.delta_hat, r.variance, set_bits(&full))),
        StudyEstimator::TargetAipw => aipw(data, &target, ContrastKind::Difference)
            .map(|r| record(replication, estimator, r.delta_hat, r.variance, set_bits(&target))),
    };
    out.unwrap_or_else(|e| failed(replication, estimator, &e))
}

/// Summary of the successful replications of one estimator.
pub fn summarize(
    estimator: StudyEstimator,
    records: &[&ReplicationRecord],
    truth: f64,
    m: usize,
) -> StudyMetrics {
    let ok: Vec<&&ReplicationRecord> = records.iter().filter(|r| r.delta_hat.is_some()).collect();
    let k = ok.len();
    let est: Vec<f64> = ok.iter().filter_map(|r| r.delta_hat).collect();
    let mean = est.iter().sum::<f64>() / k.max(1) as f64;
    let bias = if k == 0 { f64::NAN } else { mean - truth };
    let sd = if k < 2 {
        f64::NAN
    } else {
        (est.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    };
    let rmse = if k == 0 {
        f64::NAN
    } else {
        (est.iter().map(|d| (d - truth).powi(2)).sum::<f64>() / k as f64).sqrt()
    };
    let with_ci: Vec<_> = ok
        .iter()
        .filter_map(|r| Some((r.ci_low?, r.ci_high?)))
        .collect();
    let coverage = (!with_ci.is_empty() && with_ci.len() == k).then(|| {
        with_ci.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / k as f64
    });
    let mut inclusion_prob_mean = vec![0.0; m];
    for r in &ok {
        for (acc, v) in inclusion_prob_mean.iter_mut().zip(&r.inclusion) {
            *acc += v / k as f64;
        }
    }
    let n_failures = records.len() - k;
    StudyMetrics {
        estimator,
        bias,
        sd,
        rmse,
        rel_rmse: None,
        coverage,
        inclusion_prob_mean,
        n_reps: records.len(),
        n_failures,
        flagged: n_failures as f64 > FAILURE_FLAG_RATE * records.len() as f64,
        skipped: false,
    }
}

fn skipped(estimator: StudyEstimator, m: usize) -> StudyMetrics {
    StudyMetrics {
        estimator,
        bias: f64::NAN,
        sd: f64::NAN,
        rmse: f64::NAN,
        rel_rmse: None,
        coverage: None,
        inclusion_prob_mean: vec![0.0; m],
        n_reps: 0,
        n_failures: 0,
        flagged: false,
        skipped: true,
    }
}

/// Fill in the relative RMSE against the scenario's comparator, when it was run.
pub fn apply_rel_rmse(metrics: &mut [StudyMetrics], comparator: StudyEstimator) {
    let base = metrics
        .iter()
        .find(|m| m.estimator == comparator && !m.skipped)
        .map(|m| m.rmse);
    for m in metrics.iter_mut() {
        m.rel_rmse = match base {
            Some(b) if b.is_finite() && b > 0.0 && m.rmse.is_finite() => Some(m.rmse / b),
            _ => None,
        };
    }
}

/// Seed of the dataset for replication `r`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, r as u64)
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.reps < 2 {
        return Err(Error::InvalidInput(
            "a study needs at least 2 replications".into(),
        ));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no estimators requested; valid: {}",
            StudyEstimator::valid_names()
        )));
    }
    let mut estimators = cfg.estimators.clone();
    estimators.sort();
    estimators.dedup();
    let scenario = cfg.scenario;
    let m = scenario.m();
    let active: Vec<StudyEstimator> = estimators
        .iter()
        .copied()
        .filter(|e| e.applicable(scenario, cfg.n))
        .collect();
    let truth = true_effect_with(scenario, TRUE_EFFECT_DRAWS, derive_seed(cfg.seed, u64::MAX), cfg.interaction);

    let per_rep = par::map_range(cfg.reps, |r| {
        let data_seed = replication_seed(cfg.seed, r);
        match generate_with(scenario, cfg.n, data_seed, cfg.interaction) {
            Ok(data) => {
                let mut g = cfg.gbcee.clone();
                g.seed = derive_seed(data_seed, 1);
                active
                    .iter()
                    .map(|&e| run_estimator(e, &data, scenario, &g, r))
                    .collect::<Vec<_>>()
            }
            Err(e) => active.iter().map(|&est| failed(r, est, &e)).collect(),
        }
    });
    let replications: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();

    let mut metrics: Vec<StudyMetrics> = estimators
        .iter()
        .map(|&e| {
            if !active.contains(&e) {
                return skipped(e, m);
            }
            let recs: Vec<&ReplicationRecord> = replications.iter().filter(|r| r.estimator == e).collect();
            summarize(e, &recs, truth, m)
        })
        .collect();
    apply_rel_rmse(&mut metrics, scenario.comparator());
    Ok(StudyResult {
        true_effect: truth,
        metrics,
        replications,
    })
}
