use serde::{Deserialize, Serialize};

use super::{bisect, SearchConfig, SearchResult, SubsetSpec, TrialOutcome};
use crate::data::Dataset;
use crate::deps::{compute_dependencies, ResidualPolicy};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::ir::ModelGraph;
use crate::prune::{build_plan, score_filters, shrink_graph, transfer_weights, PrunePlan, RankingScope};
use crate::runtime::container::encode_weights;
use crate::runtime::{activation_floats_per_sample, evaluate, train_split, LrSchedule, TrainConfig};
use crate::tensor::WeightStore;

/// Learning rates derived from the deployed model's own training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPolicy {
    /// Rate in effect at the end of the original training; used to finetune.
    pub final_lr: f64,
    /// The original schedule's second-highest rate; retraining starts here.
    pub second_lr: f64,
    pub gamma: f64,
    /// Retraining decay epochs, 1-indexed within each retraining call.
    pub decay_epochs: Vec<usize>,
}

impl LrPolicy {
    pub fn from_training(schedule: &LrSchedule, epochs: usize) -> Self {
        LrPolicy {
            final_lr: schedule.lr_at(epochs.max(1)),
            second_lr: schedule.initial * schedule.gamma,
            gamma: schedule.gamma,
            decay_epochs: schedule.decay_epochs.clone(),
        }
    }

    pub fn finetune_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.final_lr,
            decay_epochs: vec![],
            gamma: self.gamma,
        }
    }

    pub fn retrain_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.second_lr,
            decay_epochs: self.decay_epochs.clone(),
            gamma: self.gamma,
        }
    }
}

/// Train/validation/test splits of the full dataset `D`; the subset `D'` is
/// carved out of each.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitData {
    pub fn subset(&self, subset: &SubsetSpec) -> SplitData {
        SplitData {
            train: self.train.filter_classes(&subset.class_ids),
            val: self.val.filter_classes(&subset.class_ids),
            test: self.test.filter_classes(&subset.class_ids),
        }
    }
}

/// Validation accuracy of the deployed model on the subset's samples.
pub fn baseline_accuracy(
    graph: &ModelGraph,
    weights: &WeightStore,
    subset: &SubsetSpec,
    val: &Dataset,
) -> Result<f64> {
    subset.validate(graph.num_classes())?;
    let filtered = val.filter_classes(&subset.class_ids);
    if filtered.is_empty() {
        return Err(Error::EmptySplit(format!("no validation samples for subset '{}'", subset.name)));
    }
    Ok(evaluate(graph, weights, &filtered)?.accuracy)
}

/// `n_f` epochs at the deployed model's final learning rate, best-val
/// checkpoint.
pub fn finetune(
    graph: &ModelGraph,
    weights: &WeightStore,
    train: &Dataset,
    val: &Dataset,
    n_f: usize,
    lr: &LrPolicy,
    base: &TrainConfig,
) -> Result<WeightStore> {
    let cfg = TrainConfig {
        epochs: n_f,
        lr_schedule: lr.finetune_schedule(),
        ..base.clone()
    };
    Ok(train_split(graph, weights, train, val, &cfg)?.weights)
}

#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub graph: ModelGraph,
    pub weights: WeightStore,
    pub plan: PrunePlan,
}

/// Scores, plans, shrinks and transfers in one go.
pub fn prune_at_level(
    graph: &ModelGraph,
    weights: &WeightStore,
    level: f64,
    scope: RankingScope,
    policy: ResidualPolicy,
) -> Result<PrunedModel> {
    let deps = compute_dependencies(graph, policy)?;
    let scores = score_filters(graph, weights, &deps)?;
    let plan = build_plan(graph, &deps, &scores, level, scope)?;
    let (shrunk, remap) = shrink_graph(graph, &plan)?;
    let moved = transfer_weights(weights, &remap, &shrunk)?;
    Ok(PrunedModel {
        graph: shrunk,
        weights: moved,
        plan,
    })
}

/// Weights, gradients and momentum buffers plus forward activations and their
/// gradients for one batch, in bytes.
pub(crate) fn peak_memory_estimate(graph: &ModelGraph, batch: usize) -> u64 {
    let params = crate::ir::count_params(graph).total_params;
    (4 * (3 * params + 2 * (batch * activation_floats_per_sample(graph)) as u64)) as u64
}

#[derive(Debug, Clone)]
pub struct DaprOutcome {
    pub result: SearchResult,
    pub finetuned_digest: String,
    /// Retrained model at the converged level.
    pub best: Option<PrunedModel>,
}

/// Finetune once on the subset, then bisect over pruning levels; every level
/// is pruned from the finetuned checkpoint and retrained for `n_r` epochs.
pub fn dapr_search(
    graph: &ModelGraph,
    weights: &WeightStore,
    data: &SplitData,
    subset: &SubsetSpec,
    config: &SearchConfig,
    train_cfg: &TrainConfig,
    lr: &LrPolicy,
) -> Result<DaprOutcome> {
    config.validate()?;
    train_cfg.validate()?;
    subset.validate(graph.num_classes())?;
    let sub = data.subset(subset);
    let a_star = baseline_accuracy(graph, weights, subset, &data.val)?;
    let tuned = finetune(graph, weights, &sub.train, &sub.val, config.n_f, lr, train_cfg)?;
    let tuned_digest = sha256_hex(&encode_weights(&tuned));
    let retrain_cfg = TrainConfig {
        epochs: config.n_r,
        lr_schedule: lr.retrain_schedule(),
        ..train_cfg.clone()
    };
    let mut models: Vec<(f64, PrunedModel)> = Vec::new();
    let mut trial = |level: f64| -> Result<TrialOutcome> {
        let pruned = match prune_at_level(graph, &tuned, level, config.ranking_scope, config.residual_policy) {
            Ok(p) => p,
            Err(Error::InfeasibleTarget { .. }) => {
                return Ok(TrialOutcome {
                    source_digest: Some(tuned_digest.clone()),
                    ..Default::default()
                })
            }
            Err(e) => return Err(e),
        };
        let out = train_split(&pruned.graph, &pruned.weights, &sub.train, &sub.val, &retrain_cfg)?;
        let val = match out.best_val_accuracy {
            Some(v) => v,
            None => evaluate(&pruned.graph, &out.weights, &sub.val)?.accuracy,
        };
        let test = evaluate(&pruned.graph, &out.weights, &sub.test)?.accuracy;
        let outcome = TrialOutcome {
            achieved_level: Some(pruned.plan.achieved_level),
            val_accuracy: Some(val),
            test_accuracy: Some(test),
            source_digest: Some(tuned_digest.clone()),
            peak_memory_estimate: peak_memory_estimate(&pruned.graph, retrain_cfg.batch_size),
        };
        models.push((
            level,
            PrunedModel {
                weights: out.weights,
                ..pruned
            },
        ));
        Ok(outcome)
    };
    let result = bisect(config, a_star, &mut trial)?;
    let best = result
        .converged_level
        .and_then(|l| models.into_iter().find(|(lv, _)| *lv == l).map(|(_, m)| m));
    Ok(DaprOutcome {
        result,
        finetuned_digest: tuned_digest,
        best,
    })
}
