//! Property checks shared by the core test target and the acceptance run.
//! Each check returns a description of the first violation it finds.

use std::collections::BTreeMap;

use gbcee::benchmarks::{aipw, gformula};
use gbcee::estimate::posterior_moments;
use gbcee::glm::expit;
use gbcee::model_space::{
    integrated_prior_component, marginal_prior_component, omega_term, prior_inclusion_prob,
    AdjustmentSet, DeltaIntegral, PriorConfig,
};
use gbcee::outcome_mc3::{OutcomeSpace, PriorRatio};
use gbcee::rng::{stream, SimRng};
use gbcee::tmle::{self, Contrast, ContrastKind};
use gbcee::{Dataset, VarType};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Check = fn() -> Result<(), String>;

pub const CHECKS: [(&str, Check); 7] = [
    ("eif_mean_zero", eif_mean_zero),
    ("prior_normalization_and_scale_invariance", prior_identities),
    ("mc3_matches_enumeration", mc3_matches_enumeration),
    ("mh_cycle_consistency", mh_cycle_consistency),
    ("mixture_variance_identity", mixture_variance_identity),
    ("saturated_table_agreement", saturated_table_agreement),
    ("double_robustness", double_robustness),
];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn z(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

fn coin(p: f64, rng: &mut SimRng) -> f64 {
    f64::from(u8::from(rng.random::<f64>() < p))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Random dataset with `m` standard normal covariates and linear-logistic
/// nuisance models whose coefficients are drawn from `rng`.
pub fn random_dataset(n: usize, m: usize, y_type: VarType, x_type: VarType, rng: &mut SimRng) -> Dataset {
    let u = DMatrix::from_fn(n, m, |_, _| z(rng));
    let a: Vec<f64> = (0..m).map(|_| 0.6 * z(rng)).collect();
    let b: Vec<f64> = (0..m).map(|_| 0.6 * z(rng)).collect();
    let effect = 0.5 * z(rng);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let lx: f64 = (0..m).map(|k| a[k] * u[(i, k)]).sum();
        let xi = match x_type {
            VarType::Binary => coin(expit(lx), rng),
            VarType::Continuous => lx + z(rng),
        };
        let ly: f64 = effect * xi + (0..m).map(|k| b[k] * u[(i, k)]).sum::<f64>();
        let yi = match y_type {
            VarType::Binary => coin(expit(ly), rng),
            VarType::Continuous => ly + z(rng),
        };
        x.push(xi);
        y.push(yi);
    }
    Dataset::new(y, x, u, y_type, x_type).expect("valid random dataset")
}

/// The influence values of every TMLE average to zero once the fluctuation
/// has been solved.
pub fn eif_mean_zero() -> Result<(), String> {
    use VarType::{Binary, Continuous};
    for k in 0..50u64 {
        let mut rng = stream(101, k);
        let m = 1 + (k as usize % 3);
        let n = 150 + 10 * k as usize;
        let set = AdjustmentSet::full(m);

        let d = random_dataset(n, m, Continuous, Continuous, &mut rng);
        let e = tmle::tmle_cont_cont(&d, &set).map_err(|e| e.to_string())?;
        ensure(mean(&e.eif).abs() < 1e-10, || format!("cont/cont dataset {k}: mean {}", mean(&e.eif)))?;

        for y_type in [Continuous, Binary] {
            let d = random_dataset(n, m, y_type, Binary, &mut rng);
            for level in [true, false] {
                let lm = tmle::tmle_mean_binx(&d, &set, level).map_err(|e| e.to_string())?;
                ensure(mean(&lm.eif).abs() < 1e-10, || {
                    format!("binary X, {y_type:?} Y, level {level}, dataset {k}: mean {}", mean(&lm.eif))
                })?;
            }
        }

        let d = random_dataset(n, m, Binary, Continuous, &mut rng);
        for level in [1.0, 0.0] {
            let lm = tmle::tmle_bin_cont(&d, &set, level).map_err(|e| e.to_string())?;
            ensure(mean(&lm.eif).abs() < 1e-8, || {
                format!("binary Y, continuous X, level {level}, dataset {k}: mean {}", mean(&lm.eif))
            })?;
        }
    }
    Ok(())
}

/// Conditional and marginal prior components sum to one over `αʸ`, and
/// rescaling a covariate or the outcome leaves every prior term unchanged.
pub fn prior_identities() -> Result<(), String> {
    let mut rng = stream(202, 0);
    let cfg = PriorConfig::new(500.0 * 30.0, vec![1.3], 0.7, DeltaIntegral::Exact).map_err(|e| e.to_string())?;
    for _ in 0..200 {
        let omega_m = 10f64.powf(6.0 * rng.random::<f64>() - 3.0);
        let pi = rng.random::<f64>();
        for ax in [true, false] {
            let s = prior_inclusion_prob(true, ax, omega_m) + prior_inclusion_prob(false, ax, omega_m);
            ensure((s - 1.0).abs() < 1e-12, || format!("conditional sum {s}"))?;
        }
        let s = marginal_prior_component(true, pi, omega_m) + marginal_prior_component(false, pi, omega_m);
        ensure((s - 1.0).abs() < 1e-12, || format!("marginal sum {s}"))?;
        let (dh, se) = (z(&mut rng) * 0.1, 0.05 * rng.random::<f64>() + 1e-3);
        let s = integrated_prior_component(dh, se, pi, 0, true, &cfg)
            + integrated_prior_component(dh, se, pi, 0, false, &cfg);
        ensure((s - 1.0).abs() < 1e-12, || format!("integrated sum {s}"))?;
        // δ̃ → δ̃/c with σ_U → cσ_U leaves ω_m fixed
        let c = 0.1 + 10.0 * rng.random::<f64>();
        let scaled = PriorConfig::new(cfg.omega, vec![1.3 * c], 0.7, DeltaIntegral::Exact).map_err(|e| e.to_string())?;
        let (a, b) = (omega_term(dh, 0, &cfg), omega_term(dh / c, 0, &scaled));
        ensure((a - b).abs() <= 1e-10 * a.abs().max(1e-300), || format!("omega_m {a} vs {b}"))?;
    }

    // Data-level: rescale covariates and outcome, compare every prior term.
    let d = random_dataset(400, 4, VarType::Continuous, VarType::Binary, &mut rng);
    let scales = [3.0, 0.25, 7.0, 1.5];
    let y_scale = 4.0;
    let u2 = DMatrix::from_fn(d.n(), 4, |i, k| d.u()[(i, k)] * scales[k]);
    let y2: Vec<f64> = d.y().iter().map(|y| y * y_scale).collect();
    let d2 = Dataset::new(y2, d.x().to_vec(), u2, VarType::Continuous, VarType::Binary)
        .map_err(|e| e.to_string())?;
    let pi = vec![0.9, 0.4, 0.05, 0.6];
    let mut s1 = outcome_space(&d, pi.clone())?;
    let mut s2 = outcome_space(&d2, pi)?;
    for k in 0..16u64 {
        let set = AdjustmentSet::from_index(4, k);
        let (a, b) = (s1.log_prior(&set), s2.log_prior(&set));
        match (a, b) {
            (Some(a), Some(b)) => ensure((a - b).abs() < 1e-8, || format!("log prior of {set}: {a} vs {b}"))?,
            _ => return Err(format!("model {set} could not be fitted")),
        }
    }
    Ok(())
}

fn outcome_space(d: &Dataset, pi: Vec<f64>) -> Result<OutcomeSpace, String> {
    let omega = 500.0 * (d.n() as f64).sqrt();
    let prior = PriorConfig::from_data(d, omega, DeltaIntegral::Exact).map_err(|e| e.to_string())?;
    OutcomeSpace::new(d, prior, pi, PriorRatio::Factorized).map_err(|e| e.to_string())
}

fn exact_posterior(space: &mut OutcomeSpace) -> Result<Vec<(AdjustmentSet, f64)>, String> {
    let m = space.m();
    let mut scores = Vec::new();
    for k in 0..(1u64 << m) {
        let set = AdjustmentSet::from_index(m, k);
        let s = space.log_score(&set).ok_or_else(|| format!("model {set} not fitted"))?;
        scores.push((set, s));
    }
    Ok(gbcee::mc3::normalize_log_weights(scores))
}

/// A plain Metropolis–Hastings walk driven by the engine's ratios spends time
/// in each model in proportion to the exact enumerated posterior, and the
/// engine's chain reports the same posterior.
pub fn mc3_matches_enumeration() -> Result<(), String> {
    let mut rng = stream(303, 0);
    let d = random_dataset(300, 3, VarType::Continuous, VarType::Binary, &mut rng);
    let mut space = outcome_space(&d, vec![0.8, 0.5, 0.3])?;
    let exact: BTreeMap<AdjustmentSet, f64> = exact_posterior(&mut space)?.into_iter().collect();

    let mut current = AdjustmentSet::empty(3);
    let mut counts: BTreeMap<AdjustmentSet, usize> = BTreeMap::new();
    let steps = 200_000;
    for _ in 0..steps {
        let m = rng.random_range(0..3);
        let cand = current.flipped(m);
        let r = space.mh_log_ratio(&cand, &current, m).map_err(|e| e.to_string())?;
        if r >= 0.0 || rng.random::<f64>().ln() < r {
            current = cand;
        }
        *counts.entry(current.clone()).or_default() += 1;
    }
    let tv: f64 = exact
        .iter()
        .map(|(s, p)| (p - *counts.get(s).unwrap_or(&0) as f64 / steps as f64).abs())
        .sum::<f64>()
        / 2.0;
    ensure(tv < 0.02, || format!("walk total variation {tv}"))?;

    let chain = gbcee::outcome_mc3::run_chain(&mut space, 2000, AdjustmentSet::empty(3), 9)
        .map_err(|e| e.to_string())?;
    let tv: f64 = chain
        .posterior_weights()
        .iter()
        .map(|(s, w)| (w - exact[s]).abs())
        .sum::<f64>()
        / 2.0
        + exact
            .iter()
            .filter(|(s, _)| !chain.visited.contains_key(*s))
            .map(|(_, p)| p)
            .sum::<f64>()
            / 2.0;
    ensure(tv < 0.02, || format!("chain total variation {tv}"))
}

/// Log ratios summed around any closed path of single flips vanish.
pub fn mh_cycle_consistency() -> Result<(), String> {
    let mut rng = stream(404, 0);
    for kind in [VarType::Continuous, VarType::Binary] {
        let d = random_dataset(300, 6, kind, VarType::Binary, &mut rng);
        let mut space = outcome_space(&d, vec![0.95, 0.6, 0.3, 0.02, 1e-12, 0.5])?;
        for _ in 0..40 {
            let start = AdjustmentSet::from_index(6, rng.random_range(0..64));
            let flips: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..6)).collect();
            // walk out, then undo the flips in reverse order
            let path: Vec<usize> = flips.iter().chain(flips.iter().rev()).copied().collect();
            let mut cur = start.clone();
            let mut total = 0.0;
            for &m in &path {
                let next = cur.flipped(m);
                total += space.mh_log_ratio(&next, &cur, m).map_err(|e| e.to_string())?;
                cur = next;
            }
            ensure(cur == start, || "path did not close".into())?;
            ensure(total.abs() < 1e-10, || format!("{kind:?} cycle from {start} sums to {total}"))?;
            // a genuine cycle through distinct coordinates: flip a, b, then a, b
            let (a, b) = (rng.random_range(0..6), rng.random_range(0..6));
            if a != b {
                let s1 = start.flipped(a);
                let s2 = s1.flipped(b);
                let s3 = s2.flipped(a);
                let total = space.mh_log_ratio(&s1, &start, a).map_err(|e| e.to_string())?
                    + space.mh_log_ratio(&s2, &s1, b).map_err(|e| e.to_string())?
                    + space.mh_log_ratio(&s3, &s2, a).map_err(|e| e.to_string())?
                    + space.mh_log_ratio(&start, &s3, b).map_err(|e| e.to_string())?;
                ensure(total.abs() < 1e-10, || format!("square cycle sums to {total}"))?;
            }
        }
    }
    Ok(())
}

/// `Σw(V + Δ²) − (ΣwΔ)²` equals within-model plus between-model variance.
pub fn mixture_variance_identity() -> Result<(), String> {
    let mut rng = stream(505, 0);
    for _ in 0..1000 {
        let k = rng.random_range(1..12);
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let parts: Vec<(f64, f64, f64)> = raw
            .iter()
            .map(|w| (w / total, 2.0 * z(&mut rng), rng.random::<f64>() * 0.1))
            .collect();
        let (e, v) = posterior_moments(&parts);
        let e2: f64 = parts.iter().map(|(w, d, _)| w * d).sum();
        let within: f64 = parts.iter().map(|(w, _, v)| w * v).sum();
        let between: f64 = parts.iter().map(|(w, d, _)| w * (d - e2).powi(2)).sum();
        ensure((e - e2).abs() < 1e-10, || format!("mean {e} vs {e2}"))?;
        ensure((v - (within + between)).abs() < 1e-10, || format!("variance {v} vs {}", within + between))?;
    }
    Ok(())
}

/// Stratified table: three strata coded by two dummies, cells of unequal
/// size. With a saturated propensity model TMLE and AIPW both reduce to the
/// standardized difference; when the cell means are additive the g-formula
/// does too.
pub fn saturated_table_agreement() -> Result<(), String> {
    // (stratum, x, cell size)
    let cells = [(0, 0, 6), (0, 1, 4), (1, 0, 3), (1, 1, 9), (2, 0, 8), (2, 1, 5)];
    let stratum_effect = [0.0, 1.5, -0.7];
    let effect = 2.0;
    let spreads = [0.3, 1.1, 0.6];

    let mut y = Vec::new();
    let mut yb = Vec::new();
    let mut x = Vec::new();
    let mut u = Vec::new();
    for &(s, xi, size) in &cells {
        let mu = 0.4 + effect * xi as f64 + stratum_effect[s];
        for r in 0..size {
            // residuals sum to zero within each cell
            let e = if r + 1 == size && size % 2 == 1 {
                0.0
            } else if r % 2 == 0 {
                spreads[s]
            } else {
                -spreads[s]
            };
            y.push(mu + e);
            // binary outcome: deterministic pattern with cell-specific rates
            yb.push(f64::from(u8::from((r * 7 + s * 3 + xi) % 5 < 2 + xi)));
            x.push(xi as f64);
            u.push([f64::from(u8::from(s == 1)), f64::from(u8::from(s == 2))]);
        }
    }
    let n = y.len();
    let um = DMatrix::from_fn(n, 2, |i, k| u[i][k]);
    let set = AdjustmentSet::full(2);

    let standardized = |resp: &[f64]| -> f64 {
        let mut total = 0.0;
        for s in 0..3 {
            let idx: Vec<usize> = (0..n).filter(|&i| cells_of(&u[i]) == s).collect();
            let m1: Vec<f64> = idx.iter().filter(|&&i| x[i] == 1.0).map(|&i| resp[i]).collect();
            let m0: Vec<f64> = idx.iter().filter(|&&i| x[i] == 0.0).map(|&i| resp[i]).collect();
            total += idx.len() as f64 / n as f64 * (mean(&m1) - mean(&m0));
        }
        total
    };

    let d = Dataset::new(y.clone(), x.clone(), um.clone(), VarType::Continuous, VarType::Binary)
        .map_err(|e| e.to_string())?;
    let target = standardized(&y);
    ensure((target - effect).abs() < 1e-12, || format!("table construction gives {target}"))?;
    let t = tmle::estimate(&d, &set, &Contrast::difference()).map_err(|e| e.to_string())?;
    let a = aipw(&d, &set, ContrastKind::Difference).map_err(|e| e.to_string())?;
    let g = gformula(&d, &set, ContrastKind::Difference).map_err(|e| e.to_string())?;
    for (name, v) in [("tmle", t.delta_hat), ("aipw", a.delta_hat), ("g-formula", g.delta_hat)] {
        ensure((v - target).abs() < 1e-8, || format!("continuous {name}: {v} vs {target}"))?;
    }

    let db = Dataset::new(yb.clone(), x.clone(), um, VarType::Binary, VarType::Binary).map_err(|e| e.to_string())?;
    let target = standardized(&yb);
    let t = tmle::estimate(&db, &set, &Contrast::difference()).map_err(|e| e.to_string())?;
    let a = aipw(&db, &set, ContrastKind::Difference).map_err(|e| e.to_string())?;
    for (name, v) in [("tmle", t.delta_hat), ("aipw", a.delta_hat)] {
        ensure((v - target).abs() < 1e-8, || format!("binary {name}: {v} vs {target}"))?;
    }

    // no covariates: every estimator is the difference in means
    let d0 = Dataset::new(yb.clone(), x.clone(), DMatrix::zeros(n, 0), VarType::Binary, VarType::Binary)
        .map_err(|e| e.to_string())?;
    let e0 = AdjustmentSet::empty(0);
    let m1: Vec<f64> = (0..n).filter(|&i| x[i] == 1.0).map(|i| yb[i]).collect();
    let m0: Vec<f64> = (0..n).filter(|&i| x[i] == 0.0).map(|i| yb[i]).collect();
    let target = mean(&m1) - mean(&m0);
    let t = tmle::estimate(&d0, &e0, &Contrast::difference()).map_err(|e| e.to_string())?;
    let a = aipw(&d0, &e0, ContrastKind::Difference).map_err(|e| e.to_string())?;
    let g = gformula(&d0, &e0, ContrastKind::Difference).map_err(|e| e.to_string())?;
    for (name, v) in [("tmle", t.delta_hat), ("aipw", a.delta_hat), ("g-formula", g.delta_hat)] {
        ensure((v - target).abs() < 1e-8, || format!("unadjusted {name}: {v} vs {target}"))?;
    }
    Ok(())
}

fn cells_of(u: &[f64; 2]) -> usize {
    if u[0] == 1.0 {
        1
    } else if u[1] == 1.0 {
        2
    } else {
        0
    }
}

/// Large-sample consistency when exactly one nuisance model is misspecified.
pub fn double_robustness() -> Result<(), String> {
    let set = AdjustmentSet::full(2);
    // outcome model wrong (exponential term), propensity model right
    let d = dr_dataset(400_000, true, 606);
    let g = gformula(&d, &set, ContrastKind::Difference).map_err(|e| e.to_string())?;
    ensure((g.delta_hat - 1.0).abs() > 0.1, || {
        format!("g-formula bias {} too small to exercise the outcome misspecification", g.delta_hat - 1.0)
    })?;
    let t = tmle::estimate(&d, &set, &Contrast::difference()).map_err(|e| e.to_string())?;
    let a = aipw(&d, &set, ContrastKind::Difference).map_err(|e| e.to_string())?;
    for (name, v) in [("tmle", t.delta_hat), ("aipw", a.delta_hat)] {
        ensure((v - 1.0).abs() < 0.08, || format!("{name} with misspecified outcome: {v}"))?;
    }

    // propensity model wrong (quadratic term), outcome model right
    let d = dr_dataset(100_000, false, 607);
    let t = tmle::estimate(&d, &set, &Contrast::difference()).map_err(|e| e.to_string())?;
    let a = aipw(&d, &set, ContrastKind::Difference).map_err(|e| e.to_string())?;
    for (name, v) in [("tmle", t.delta_hat), ("aipw", a.delta_hat)] {
        ensure((v - 1.0).abs() < 0.03, || format!("{name} with misspecified propensity: {v}"))?;
    }
    Ok(())
}

fn dr_dataset(n: usize, outcome_wrong: bool, seed: u64) -> Dataset {
    let mut rng = stream(seed, 0);
    let u = DMatrix::from_fn(n, 2, |_, _| z(&mut rng));
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (u1, u2) = (u[(i, 0)], u[(i, 1)]);
        let (eta, extra, sd) = if outcome_wrong {
            (u1 + 0.4 * u2, 2.0 * u1.exp(), 0.5)
        } else {
            (-0.5 + 0.6 * u1 - 0.5 * u2 + 0.5 * u1 * u1, 0.0, 1.0)
        };
        let xi = coin(expit(eta), &mut rng);
        x.push(xi);
        y.push(xi + u1 + u2 + extra + sd * z(&mut rng));
    }
    Dataset::new(y, x, u, VarType::Continuous, VarType::Binary).expect("valid dataset")
}
