use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PrunePlan;

/// Percentage of selected filters that differ between plans. Per layer:
/// `100 * (1 - |A ∩ B| / |A|)`; overall pools the counts of all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_layer: BTreeMap<String, f64>,
    pub overall: f64,
    pub pair_count: usize,
}

pub fn filter_divergence(a: &PrunePlan, b: &PrunePlan) -> Result<DivergenceReport> {
    if a.params_before != 0 && b.params_before != 0 && a.params_before != b.params_before {
        return Err(Error::PlanMismatch(format!(
            "plans come from different graphs ({} vs {} parameters)",
            a.params_before, b.params_before
        )));
    }
    let layers: BTreeSet<&String> = a.removals.keys().chain(b.removals.keys()).collect();
    let mut per_layer = BTreeMap::new();
    let (mut shared_total, mut size_total) = (0usize, 0usize);
    for layer in layers {
        let sa: BTreeSet<usize> = a.removed(layer).iter().copied().collect();
        let sb: BTreeSet<usize> = b.removed(layer).iter().copied().collect();
        if sa.len() != sb.len() {
            return Err(Error::PlanMismatch(format!(
                "layer '{layer}' removes {} vs {} filters",
                sa.len(),
                sb.len()
            )));
        }
        if sa.is_empty() {
            continue;
        }
        let shared = sa.intersection(&sb).count();
        per_layer.insert(layer.clone(), 100.0 * (1.0 - shared as f64 / sa.len() as f64));
        shared_total += shared;
        size_total += sa.len();
    }
    let overall = if size_total == 0 {
        0.0
    } else {
        100.0 * (1.0 - shared_total as f64 / size_total as f64)
    };
    Ok(DivergenceReport {
        per_layer,
        overall,
        pair_count: 1,
    })
}

/// Mean of [`filter_divergence`] over all unordered pairs.
pub fn pairwise_divergence(plans: &[PrunePlan]) -> Result<DivergenceReport> {
    if plans.len() < 2 {
        return Err(Error::PlanMismatch(format!("need at least 2 plans, got {}", plans.len())));
    }
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut overall = 0.0;
    let mut pairs = 0;
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            let r = filter_divergence(&plans[i], &plans[j])?;
            for (k, v) in r.per_layer {
                *sums.entry(k).or_insert(0.0) += v;
            }
            overall += r.overall;
            pairs += 1;
        }
    }
    Ok(DivergenceReport {
        per_layer: sums.into_iter().map(|(k, v)| (k, v / pairs as f64)).collect(),
        overall: overall / pairs as f64,
        pair_count: pairs,
    })
}
