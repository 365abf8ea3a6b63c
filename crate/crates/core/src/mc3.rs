//! Markov chain Monte Carlo model composition over adjustment sets.
//!
//! Proposals flip one uniformly chosen covariate. Every candidate whose
//! posterior ratio was evaluated is recorded with its log posterior relative
//! to the starting model, obtained by chaining the evaluated ratios. Model
//! weights are then computed from those ratios rather than visit counts.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model_space::AdjustmentSet;
use crate::rng::SimRng;

/// Source of posterior ratios between neighbouring models.
pub trait ModelRatio {
    /// `ln P(candidate | data) − ln P(current | data)` where the two sets
    /// differ only in covariate `m`; `None` if the candidate cannot be fitted.
    fn log_ratio(&mut self, candidate: &AdjustmentSet, current: &AdjustmentSet, m: usize) -> Option<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub reference: AdjustmentSet,
    pub current: AdjustmentSet,
    /// Log posterior of each recorded model relative to `reference`.
    pub visited: BTreeMap<AdjustmentSet, f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub rejected_fits: usize,
}

impl ChainState {
    pub fn new(start: AdjustmentSet) -> Self {
        let mut visited = BTreeMap::new();
        visited.insert(start.clone(), 0.0);
        Self {
            reference: start.clone(),
            current: start,
            visited,
            iterations: 0,
            accepted: 0,
            rejected_fits: 0,
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }

    /// Normalized posterior weights over the recorded models.
    pub fn posterior_weights(&self) -> Vec<(AdjustmentSet, f64)> {
        normalize_log_weights(self.visited.iter().map(|(s, l)| (s.clone(), *l)))
    }
}

/// Log-sum-exp normalization of `(model, log weight)` pairs.
pub fn normalize_log_weights(
    items: impl IntoIterator<Item = (AdjustmentSet, f64)>,
) -> Vec<(AdjustmentSet, f64)> {
    let items: Vec<_> = items.into_iter().collect();
    let max = items
        .iter()
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = items.iter().map(|(_, l)| (l - max).exp()).sum();
    items
        .into_iter()
        .map(|(s, l)| (s, (l - max).exp() / total))
        .collect()
}

/// Run `iterations` Metropolis–Hastings steps from `start`.
pub fn run_chain<R: ModelRatio>(
    ratio: &mut R,
    start: AdjustmentSet,
    iterations: usize,
    rng: &mut SimRng,
) -> ChainState {
    let mut state = ChainState::new(start);
    let m_total = state.current.len();
    if m_total == 0 {
        return state;
    }
    for _ in 0..iterations {
        state.iterations += 1;
        let m = rng.random_range(0..m_total);
        let u: f64 = rng.random();
        let candidate = state.current.flipped(m);
        let Some(log_ratio) = ratio.log_ratio(&candidate, &state.current, m) else {
            state.rejected_fits += 1;
            continue;
        };
        let base = state.visited[&state.current];
        state
            .visited
            .entry(candidate.clone())
            .or_insert(base + log_ratio);
        if log_ratio >= 0.0 || u.ln() < log_ratio {
            state.current = candidate;
            state.accepted += 1;
        }
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Independent per-covariate log scores.
    struct Additive(Vec<f64>);

    impl ModelRatio for Additive {
        fn log_ratio(&mut self, c: &AdjustmentSet, _: &AdjustmentSet, m: usize) -> Option<f64> {
            Some(if c.contains(m) { self.0[m] } else { -self.0[m] })
        }
    }

    #[test]
    fn weights_from_ratios() {
        let a: AdjustmentSet = "0".parse().unwrap();
        let b: AdjustmentSet = "1".parse().unwrap();
        let w = normalize_log_weights([(a.clone(), 0.0), (b.clone(), 3f64.ln())]);
        assert!((w[0].1 - 0.25).abs() < 1e-15);
        assert!((w[1].1 - 0.75).abs() < 1e-15);
        let shifted = normalize_log_weights([(a, 10.0), (b, 10.0 + 3f64.ln())]);
        assert!((shifted[1].1 - 0.75).abs() < 1e-14);
        let single = ChainState::new(AdjustmentSet::empty(3));
        assert_eq!(single.posterior_weights()[0].1, 1.0);
    }

    #[test]
    fn chain_recovers_product_posterior() {
        let scores = vec![1.0, -0.5, 0.0];
        let mut r = Additive(scores.clone());
        let state = run_chain(&mut r, AdjustmentSet::empty(3), 2000, &mut seeded(5));
        assert_eq!(state.visited.len(), 8);
        for (s, w) in state.posterior_weights() {
            let expect: f64 = (0..3)
                .map(|m| {
                    let e = scores[m].exp();
                    if s.contains(m) { e / (1.0 + e) } else { 1.0 / (1.0 + e) }
                })
                .product();
            assert!((w - expect).abs() < 1e-12, "{s}: {w} vs {expect}");
        }
    }

    #[test]
    fn empty_model_space_is_a_single_atom() {
        let mut r = Additive(vec![]);
        let state = run_chain(&mut r, AdjustmentSet::empty(0), 100, &mut seeded(1));
        assert_eq!(state.visited.len(), 1);
        assert_eq!(state.iterations, 0);
    }
}
