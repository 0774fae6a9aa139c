//! Data-aware pruning search: bisection over a grid of pruning levels, the
//! exhaustive tradeoff sweep, and filter-selection divergence.

mod dapr;
mod divergence;
mod sweep;

pub use dapr::{
    baseline_accuracy, dapr_search, finetune, prune_at_level, DaprOutcome, LrPolicy, PrunedModel, SplitData,
};
pub use divergence::{filter_divergence, pairwise_divergence, DivergenceReport};
pub use sweep::{oracle_sweep, read_sweep_csv, write_sweep_csv, SweepMode, SweepOptions, SweepRow};

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deps::ResidualPolicy;
use crate::error::{Error, Result};
use crate::prune::RankingScope;

/// The deployment subset: fine class ids of the parent label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub name: String,
    pub class_ids: BTreeSet<usize>,
}

impl SubsetSpec {
    pub fn new(name: impl Into<String>, ids: impl IntoIterator<Item = usize>) -> Self {
        SubsetSpec {
            name: name.into(),
            class_ids: ids.into_iter().collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_ids.is_empty() {
            return Err(Error::Config(format!("subset '{}' is empty", self.name)));
        }
        if let Some(bad) = self.class_ids.iter().find(|c| **c >= num_classes) {
            return Err(Error::UnknownClass(bad.to_string()));
        }
        Ok(())
    }
}

/// What a level must reach to count as a success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    /// Validation accuracy of the deployed model on the subset.
    #[default]
    Baseline,
    ExplicitTarget(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub p_l: f64,
    pub p_u: f64,
    pub p_i: f64,
    pub p_0: f64,
    pub n_f: usize,
    pub n_r: usize,
    pub ranking_scope: RankingScope,
    pub residual_policy: ResidualPolicy,
    pub acceptance: Acceptance,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            p_l: 5.0,
            p_u: 95.0,
            p_i: 5.0,
            p_0: 50.0,
            n_f: 5,
            n_r: 25,
            ranking_scope: RankingScope::Global,
            residual_policy: ResidualPolicy::TieGroup,
            acceptance: Acceptance::Baseline,
        }
    }
}

const GRID_EPS: f64 = 1e-9;

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.p_i > 0.0) {
            return bad(format!("p_i must be positive, got {}", self.p_i));
        }
        if !(0.0 <= self.p_l && self.p_l <= self.p_0 && self.p_0 <= self.p_u && self.p_u < 100.0) {
            return bad(format!(
                "need 0 <= p_l <= p_0 <= p_u < 100, got {} {} {}",
                self.p_l, self.p_0, self.p_u
            ));
        }
        let steps = (self.p_u - self.p_l) / self.p_i;
        if (steps - steps.round()).abs() > GRID_EPS {
            return bad(format!("p_u - p_l = {} is not a multiple of p_i = {}", self.p_u - self.p_l, self.p_i));
        }
        if self.grid_index(self.p_0).is_none() {
            return bad(format!("p_0 = {} is not on the grid", self.p_0));
        }
        Ok(())
    }

    /// `p_l, p_l + p_i, ..., p_u`.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.p_u - self.p_l) / self.p_i).round() as usize + 1;
        (0..n).map(|i| self.p_l + i as f64 * self.p_i).collect()
    }

    pub fn grid_index(&self, level: f64) -> Option<usize> {
        self.grid().iter().position(|g| (g - level).abs() < GRID_EPS)
    }
}

/// Result of evaluating one pruning level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialOutcome {
    /// `None` when the level was infeasible.
    pub achieved_level: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Digest of the weights the level was pruned from.
    pub source_digest: Option<String>,
    pub peak_memory_estimate: u64,
}

/// Evaluates pruning levels for the bisection driver.
pub trait LevelTrial {
    fn run(&mut self, level: f64) -> Result<TrialOutcome>;
}

impl<F: FnMut(f64) -> Result<TrialOutcome>> LevelTrial for F {
    fn run(&mut self, level: f64) -> Result<TrialOutcome> {
        self(level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub level: f64,
    pub achieved_level: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub success: bool,
    pub wall_seconds: f64,
    pub peak_memory_estimate: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub converged_level: Option<f64>,
    pub baseline_accuracy: f64,
    pub threshold: f64,
    pub trace: Vec<TraceEntry>,
}

impl SearchResult {
    /// Levels visited, in order.
    pub fn levels(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.level).collect()
    }
}

/// Bisection over the level grid.
///
/// The driver keeps the open interval of untried candidates between the
/// highest success `lo` and the lowest failure `hi` (initially beyond both
/// grid ends). On success the next level is the midpoint of the candidates
/// above, rounded up; on failure the midpoint below, rounded down. It stops
/// when no candidate remains, i.e. when the next level would not change. The
/// converged level is the highest success (`None` if every try failed).
pub fn bisect<L: LevelTrial + ?Sized>(
    config: &SearchConfig,
    baseline: f64,
    trial: &mut L,
) -> Result<SearchResult> {
    config.validate()?;
    let threshold = match config.acceptance {
        Acceptance::Baseline => baseline,
        Acceptance::ExplicitTarget(t) => t,
    };
    let grid = config.grid();
    let mut lo: isize = -1;
    let mut hi: isize = grid.len() as isize;
    let mut cur = config.grid_index(config.p_0).expect("validated") as isize;
    let mut trace = Vec::new();
    loop {
        let level = grid[cur as usize];
        let start = Instant::now();
        let out = trial.run(level)?;
        let success = out.achieved_level.is_some() && out.val_accuracy.is_some_and(|v| v >= threshold);
        trace.push(TraceEntry {
            iteration: trace.len(),
            level,
            achieved_level: out.achieved_level,
            val_accuracy: out.val_accuracy,
            test_accuracy: out.test_accuracy,
            success,
            wall_seconds: start.elapsed().as_secs_f64(),
            peak_memory_estimate: out.peak_memory_estimate,
            source_digest: out.source_digest,
        });
        if success {
            lo = cur;
        } else {
            hi = cur;
        }
        let (a, b) = (lo + 1, hi - 1);
        if a > b {
            break;
        }
        let next = if success { (a + b + 1) / 2 } else { (a + b) / 2 };
        if next == cur {
            break;
        }
        cur = next;
    }
    Ok(SearchResult {
        converged_level: (lo >= 0).then(|| grid[lo as usize]),
        baseline_accuracy: baseline,
        threshold,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(threshold: f64) -> impl FnMut(f64) -> Result<TrialOutcome> {
        move |level| {
            Ok(TrialOutcome {
                achieved_level: Some(level),
                val_accuracy: Some(if level <= threshold { 1.0 } else { 0.0 }),
                ..Default::default()
            })
        }
    }

    #[test]
    fn monotone_threshold_seventy() {
        let cfg = SearchConfig::default();
        let r = bisect(&cfg, 0.5, &mut oracle(70.0)).unwrap();
        assert_eq!(r.converged_level, Some(70.0));
        assert!(r.trace.len() <= 6);
    }

    #[test]
    fn all_fail_descends_to_lower_bound() {
        let cfg = SearchConfig::default();
        let r = bisect(&cfg, 0.5, &mut oracle(-1.0)).unwrap();
        assert_eq!(r.converged_level, None);
        assert_eq!(r.levels(), vec![50.0, 25.0, 10.0, 5.0]);
    }

    #[test]
    fn all_pass_reaches_upper_bound() {
        let cfg = SearchConfig::default();
        let r = bisect(&cfg, 0.5, &mut oracle(100.0)).unwrap();
        assert_eq!(r.converged_level, Some(95.0));
        assert_eq!(*r.levels().last().unwrap(), 95.0);
    }

    #[test]
    fn grid_validation() {
        let mut cfg = SearchConfig::default();
        assert_eq!(cfg.grid().len(), 19);
        cfg.p_0 = 52.0;
        assert!(cfg.validate().is_err());
        cfg.p_0 = 50.0;
        cfg.p_u = 93.0;
        assert!(cfg.validate().is_err());
        cfg.p_u = 95.0;
        cfg.p_l = 60.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn infeasible_level_counts_as_failure() {
        let cfg = SearchConfig::default();
        let mut t = |level: f64| {
            Ok(TrialOutcome {
                achieved_level: (level < 90.0).then_some(level),
                val_accuracy: Some(1.0),
                ..Default::default()
            })
        };
        let r = bisect(&cfg, 0.5, &mut t).unwrap();
        assert_eq!(r.converged_level, Some(85.0));
    }

    #[test]
    fn explicit_target_overrides_baseline() {
        let cfg = SearchConfig {
            acceptance: Acceptance::ExplicitTarget(0.9),
            ..Default::default()
        };
        let mut t = |level: f64| {
            Ok(TrialOutcome {
                achieved_level: Some(level),
                val_accuracy: Some(if level <= 30.0 { 0.95 } else { 0.85 }),
                ..Default::default()
            })
        };
        let r = bisect(&cfg, 0.5, &mut t).unwrap();
        assert_eq!(r.threshold, 0.9);
        assert_eq!(r.converged_level, Some(30.0));
    }
}
