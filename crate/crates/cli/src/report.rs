//! Machine-readable run reports and the human tables rendered from them.
//!
//! Reports hold no wall-clock data, so identical commands produce identical
//! bytes. Non-finite numbers are stored as `null`.

use std::fmt::Write as _;

use gbcee::estimate::{Diagnostics, GbceeConfig, GbceeResult};
use gbcee::simulation::{StudyConfig, StudyMetrics, StudyResult};
use gbcee::VarType;
use serde::{Deserialize, Serialize};

/// Number of models listed in the estimate report.
pub const TOP_MODELS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

impl Software {
    pub fn current() -> Self {
        Self {
            name: "gbcee".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<C, R> {
    pub software: Software,
    pub command: String,
    pub seed: u64,
    pub config: C,
    pub results: R,
}

pub type EstimateReport = RunReport<EstimateConfig, EstimateResults>;
pub type SimulateReport = RunReport<StudyConfig, SimulateResults>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub data: String,
    pub outcome: String,
    pub exposure: String,
    pub covariates: Vec<String>,
    pub outcome_type: VarType,
    pub exposure_type: VarType,
    pub n: usize,
    pub gbcee: GbceeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionRow {
    pub covariate: String,
    pub outcome: f64,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub covariates: Vec<String>,
    pub weight: f64,
    pub delta_hat: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub estimator: String,
    pub delta_hat: Option<f64>,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResults {
    pub delta_hat: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub omega: f64,
    pub inclusion: Vec<InclusionRow>,
    pub n_models: usize,
    pub top_models: Vec<ModelRow>,
    pub benchmarks: Vec<BenchmarkRow>,
    pub diagnostics: Diagnostics,
}

impl EstimateResults {
    pub fn new(r: &GbceeResult, names: &[String], benchmarks: Vec<BenchmarkRow>) -> Self {
        let inclusion = names
            .iter()
            .enumerate()
            .map(|(k, name)| InclusionRow {
                covariate: name.clone(),
                outcome: r.inclusion_probs_outcome[k],
                exposure: r.inclusion_probs_exposure[k],
            })
            .collect();
        let top_models = r
            .models
            .iter()
            .take(TOP_MODELS)
            .map(|wm| ModelRow {
                covariates: wm.set.included().map(|k| names[k].clone()).collect(),
                weight: wm.weight,
                delta_hat: wm.estimate.delta_hat,
                variance: wm.estimate.variance,
            })
            .collect();
        Self {
            delta_hat: r.delta_hat,
            variance: r.variance,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            omega: r.omega,
            inclusion,
            n_models: r.models.len(),
            top_models,
            benchmarks,
            diagnostics: r.diagnostics.clone(),
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub bias: Option<f64>,
    pub sd: Option<f64>,
    pub rmse: Option<f64>,
    pub rel_rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub n_reps: usize,
    pub n_failures: usize,
    pub flagged: bool,
    pub skipped: bool,
}

impl From<&StudyMetrics> for MetricsRow {
    fn from(m: &StudyMetrics) -> Self {
        Self {
            estimator: m.estimator.name().into(),
            bias: finite(m.bias),
            sd: finite(m.sd),
            rmse: finite(m.rmse),
            rel_rmse: m.rel_rmse,
            coverage: m.coverage,
            n_reps: m.n_reps,
            n_failures: m.n_failures,
            flagged: m.flagged,
            skipped: m.skipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResults {
    pub true_effect: f64,
    pub metrics: Vec<MetricsRow>,
}

impl From<&StudyResult> for SimulateResults {
    fn from(r: &StudyResult) -> Self {
        Self {
            true_effect: r.true_effect,
            metrics: r.metrics.iter().map(MetricsRow::from).collect(),
        }
    }
}

/// One row of the long-format inclusion-probability CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionCsvRow {
    pub estimator: String,
    pub covariate: String,
    pub inclusion_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationCsvRow {
    pub replication: usize,
    pub estimator: String,
    pub delta_hat: Option<f64>,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub error: Option<String>,
}

pub fn inclusion_rows(r: &StudyResult) -> Vec<InclusionCsvRow> {
    r.metrics
        .iter()
        .filter(|m| !m.skipped)
        .flat_map(|m| {
            m.inclusion_prob_mean
                .iter()
                .enumerate()
                .map(move |(k, &p)| InclusionCsvRow {
                    estimator: m.estimator.name().into(),
                    covariate: format!("U{}", k + 1),
                    inclusion_prob: p,
                })
        })
        .collect()
}

pub fn replication_rows(r: &StudyResult) -> Vec<ReplicationCsvRow> {
    let mut rows: Vec<ReplicationCsvRow> = r
        .replications
        .iter()
        .map(|rec| ReplicationCsvRow {
            replication: rec.replication,
            estimator: rec.estimator.name().into(),
            delta_hat: rec.delta_hat,
            variance: rec.variance,
            ci_low: rec.ci_low,
            ci_high: rec.ci_high,
            error: rec.error.clone(),
        })
        .collect();
    rows.sort_by(|a, b| (a.replication, &a.estimator).cmp(&(b.replication, &b.estimator)));
    rows
}

fn opt(v: Option<f64>, width: usize, prec: usize) -> String {
    match v {
        Some(x) => format!("{x:>width$.prec$}"),
        None => format!("{:>width$}", "."),
    }
}

pub fn render_estimate(rep: &EstimateReport) -> String {
    let r = &rep.results;
    let mut s = String::new();
    let _ = writeln!(s, "estimate   {:.6}", r.delta_hat);
    let _ = writeln!(s, "variance   {:.6e}", r.variance);
    let _ = writeln!(s, "95% CI     [{:.6}, {:.6}]", r.ci_low, r.ci_high);
    let _ = writeln!(s, "omega      {:.4}", r.omega);
    let _ = writeln!(s, "\n{:<20} {:>10} {:>10}", "covariate", "outcome", "exposure");
    for row in &r.inclusion {
        let _ = writeln!(s, "{:<20} {:>10.4} {:>10.4}", row.covariate, row.outcome, row.exposure);
    }
    let _ = writeln!(
        s,
        "\ntop {} of {} models",
        r.top_models.len(),
        r.n_models
    );
    let _ = writeln!(s, "{:>8} {:>10} {:>12}  covariates", "weight", "estimate", "variance");
    for m in &r.top_models {
        let set = if m.covariates.is_empty() {
            "(none)".to_string()
        } else {
            m.covariates.join(",")
        };
        let _ = writeln!(s, "{:>8.4} {:>10.4} {:>12.4e}  {set}", m.weight, m.delta_hat, m.variance);
    }
    if !r.benchmarks.is_empty() {
        let _ = writeln!(s, "\n{:<12} {:>10} {:>10} {:>10}", "benchmark", "estimate", "ci_low", "ci_high");
        for b in &r.benchmarks {
            match &b.error {
                Some(e) => {
                    let _ = writeln!(s, "{:<12} failed: {e}", b.estimator);
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:<12} {} {} {}",
                        b.estimator,
                        opt(b.delta_hat, 10, 4),
                        opt(b.ci_low, 10, 4),
                        opt(b.ci_high, 10, 4)
                    );
                }
            }
        }
    }
    let d = &r.diagnostics;
    let _ = writeln!(
        s,
        "\nchain acceptance {:.3}, {} visited, {} pruned, {} failed estimates, {} truncated propensities",
        d.chain_acceptance_rate, d.visited_models, d.pruned_models, d.failed_estimates, d.positivity_truncations
    );
    s
}

pub fn render_simulate(rep: &SimulateReport) -> String {
    let c = &rep.config;
    let r = &rep.results;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Scenario {}, n = {}, {} replications, true effect {:.4}",
        c.scenario, c.n, c.reps, r.true_effect
    );
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>8} {:>9} {:>6} {:>9}",
        "method", "bias", "sd", "rel.rmse", "cp", "failures"
    );
    for m in &r.metrics {
        if m.skipped {
            let _ = writeln!(s, "{:<12} not applicable at this sample size", m.estimator);
            continue;
        }
        let flag = if m.flagged { " *" } else { "" };
        let _ = writeln!(
            s,
            "{:<12} {} {} {} {} {:>9}{flag}",
            m.estimator,
            opt(m.bias, 8, 3),
            opt(m.sd, 8, 3),
            opt(m.rel_rmse, 9, 2),
            opt(m.coverage, 6, 2),
            m.n_failures
        );
    }
    if r.metrics.iter().any(|m| m.flagged) {
        let _ = writeln!(s, "* failed on more than 10% of replications");
    }
    s
}
