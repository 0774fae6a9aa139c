use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dapr::{baseline_accuracy, finetune, prune_at_level, LrPolicy, SplitData};
use super::{SearchConfig, SubsetSpec};
use crate::error::{Error, Result};
use crate::ir::{count_ops, count_params, ModelGraph};
use crate::runtime::{bench_inference, evaluate, train_split, TrainConfig};
use crate::tensor::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Finetune on the subset, prune, retrain on the subset.
    SubsetAware,
    /// Prune the deployed model, retrain on the full dataset for `n_f + n_r`.
    SubsetAgnostic,
    /// The deployed model itself.
    Unpruned,
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::SubsetAware => "subset-aware",
            SweepMode::SubsetAgnostic => "subset-agnostic",
            SweepMode::Unpruned => "unpruned",
        })
    }
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subset-aware" | "subset_aware" => Ok(SweepMode::SubsetAware),
            "subset-agnostic" | "subset_agnostic" => Ok(SweepMode::SubsetAgnostic),
            "unpruned" => Ok(SweepMode::Unpruned),
            other => Err(Error::Config(format!("unknown sweep mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub modes: Vec<SweepMode>,
    pub latency_batch: usize,
    /// Timed repetitions per model; 0 skips latency measurement.
    pub latency_reps: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            modes: vec![SweepMode::Unpruned, SweepMode::SubsetAware, SweepMode::SubsetAgnostic],
            latency_batch: 1,
            latency_reps: 10,
        }
    }
}

/// One CSV row of the tradeoff table. Empty cells mark infeasible levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: SweepMode,
    pub target_level: f64,
    pub achieved_level: Option<f64>,
    pub test_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub giga_ops: Option<f64>,
    pub latency_ms: Option<f64>,
    pub params: Option<u64>,
    pub wall_seconds: f64,
}

fn latency(graph: &ModelGraph, weights: &WeightStore, opts: &SweepOptions) -> Result<Option<f64>> {
    if opts.latency_reps == 0 {
        return Ok(None);
    }
    Ok(Some(bench_inference(graph, weights, opts.latency_batch, opts.latency_reps)?.mean_ms))
}

/// Evaluates every grid level in every requested mode.
#[allow(clippy::too_many_arguments)]
pub fn oracle_sweep(
    graph: &ModelGraph,
    weights: &WeightStore,
    data: &SplitData,
    subset: &SubsetSpec,
    config: &SearchConfig,
    train_cfg: &TrainConfig,
    lr: &LrPolicy,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    train_cfg.validate()?;
    subset.validate(graph.num_classes())?;
    if opts.latency_reps > 0 && opts.latency_reps < 10 {
        return Err(Error::Config("latency_reps must be 0 or at least 10".into()));
    }
    let sub = data.subset(subset);
    let mut modes = opts.modes.clone();
    modes.sort();
    modes.dedup();
    let mut rows = Vec::new();

    if modes.contains(&SweepMode::Unpruned) {
        let t = Instant::now();
        rows.push(SweepRow {
            mode: SweepMode::Unpruned,
            target_level: 0.0,
            achieved_level: Some(0.0),
            test_acc: Some(evaluate(graph, weights, &sub.test)?.accuracy),
            val_acc: Some(baseline_accuracy(graph, weights, subset, &data.val)?),
            giga_ops: Some(count_ops(graph).total_giga_ops),
            latency_ms: latency(graph, weights, opts)?,
            params: Some(count_params(graph).total_params),
            wall_seconds: t.elapsed().as_secs_f64(),
        });
    }

    for mode in modes.iter().copied().filter(|m| *m != SweepMode::Unpruned) {
        let (source, train_set, val_set, epochs) = match mode {
            SweepMode::SubsetAware => (
                finetune(graph, weights, &sub.train, &sub.val, config.n_f, lr, train_cfg)?,
                &sub.train,
                &sub.val,
                config.n_r,
            ),
            _ => (weights.clone(), &data.train, &data.val, config.n_f + config.n_r),
        };
        let retrain = TrainConfig {
            epochs,
            lr_schedule: lr.retrain_schedule(),
            ..train_cfg.clone()
        };
        for level in config.grid() {
            let t = Instant::now();
            let pruned = match prune_at_level(graph, &source, level, config.ranking_scope, config.residual_policy) {
                Ok(p) => p,
                Err(Error::InfeasibleTarget { .. }) => {
                    rows.push(SweepRow {
                        mode,
                        target_level: level,
                        achieved_level: None,
                        test_acc: None,
                        val_acc: None,
                        giga_ops: None,
                        latency_ms: None,
                        params: None,
                        wall_seconds: t.elapsed().as_secs_f64(),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let out = train_split(&pruned.graph, &pruned.weights, train_set, val_set, &retrain)?;
            rows.push(SweepRow {
                mode,
                target_level: level,
                achieved_level: Some(pruned.plan.achieved_level),
                test_acc: Some(evaluate(&pruned.graph, &out.weights, &sub.test)?.accuracy),
                val_acc: Some(evaluate(&pruned.graph, &out.weights, &sub.val)?.accuracy),
                giga_ops: Some(count_ops(&pruned.graph).total_giga_ops),
                latency_ms: latency(&pruned.graph, &out.weights, opts)?,
                params: Some(count_params(&pruned.graph).total_params),
                wall_seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Schema(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Schema(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let expected = [
        "mode",
        "target_level",
        "achieved_level",
        "test_acc",
        "val_acc",
        "giga_ops",
        "latency_ms",
        "params",
        "wall_seconds",
    ];
    let headers = r.headers().map_err(|e| Error::Schema(format!("csv: {e}")))?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Schema(format!("unexpected CSV header {:?}", headers)));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Schema(format!("csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_empty_cells() {
        let rows = vec![
            SweepRow {
                mode: SweepMode::SubsetAware,
                target_level: 50.0,
                achieved_level: Some(50.3),
                test_acc: Some(0.75),
                val_acc: Some(0.8),
                giga_ops: Some(0.0123),
                latency_ms: Some(1.5),
                params: Some(1234),
                wall_seconds: 3.0,
            },
            SweepRow {
                mode: SweepMode::SubsetAgnostic,
                target_level: 95.0,
                achieved_level: None,
                test_acc: None,
                val_acc: None,
                giga_ops: None,
                latency_ms: None,
                params: None,
                wall_seconds: 0.1,
            },
        ];
        let text = write_sweep_csv(&rows).unwrap();
        assert!(text.starts_with("mode,target_level,achieved_level,test_acc,val_acc,giga_ops,latency_ms,params,wall_seconds\n"));
        assert!(text.contains("subset-agnostic,95.0,,,,,,,0.1"));
        assert_eq!(read_sweep_csv(&text).unwrap(), rows);
    }
}
