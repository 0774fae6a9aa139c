use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LayerKind, ModelGraph};

/// Parameter and operation census.
///
/// Parameters: Conv `n*(m/groups)*k^2 (+n bias)`, BatchNorm `4*channels`
/// (gamma, beta, running mean, running var), Linear `in*out + out`.
/// Operations: one multiply-accumulate counts as two ops, Conv and Linear only.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer_params: BTreeMap<String, u64>,
    pub total_params: u64,
    pub per_layer_ops: BTreeMap<String, u64>,
    pub total_ops: u64,
    pub total_giga_ops: f64,
    pub memory_bytes: u64,
}

impl CostReport {
    /// Both censuses at once.
    pub fn of(graph: &ModelGraph) -> Self {
        let params = count_params(graph);
        let ops = count_ops(graph);
        CostReport {
            per_layer_ops: ops.per_layer_ops,
            total_ops: ops.total_ops,
            total_giga_ops: ops.total_giga_ops,
            ..params
        }
    }
}

pub(crate) fn layer_params(kind: &LayerKind) -> Option<u64> {
    match kind {
        LayerKind::Conv(p) => {
            let w = p.out_channels * p.fan_in_channels() * p.kernel * p.kernel;
            let b = if p.has_bias { p.out_channels } else { 0 };
            Some((w + b) as u64)
        }
        LayerKind::BatchNorm(p) => Some(4 * p.channels as u64),
        LayerKind::Linear(p) => Some((p.in_features * p.out_features + p.out_features) as u64),
        _ => None,
    }
}

/// Parameters of a Conv/BatchNorm/Linear layer once its output channel count
/// is `out` and it is fed `in_channels` channels of spatial area `area_in`.
pub(crate) fn layer_params_for_counts(kind: &LayerKind, out: usize, in_channels: usize, area_in: usize) -> u64 {
    match kind {
        LayerKind::Conv(p) => {
            let fan_in = if p.groups == 1 { in_channels } else { 1 };
            let b = if p.has_bias { out } else { 0 };
            (out * fan_in * p.kernel * p.kernel + b) as u64
        }
        LayerKind::BatchNorm(_) => 4 * in_channels as u64,
        LayerKind::Linear(p) => {
            let fan_in = in_channels * area_in;
            (fan_in * p.out_features + p.out_features) as u64
        }
        _ => 0,
    }
}

pub fn count_params(graph: &ModelGraph) -> CostReport {
    let mut report = CostReport::default();
    for node in graph.nodes() {
        if let Some(p) = layer_params(&node.kind) {
            report.per_layer_params.insert(node.id.clone(), p);
            report.total_params += p;
        }
    }
    report.memory_bytes = report.total_params * 4;
    report
}

pub fn count_ops(graph: &ModelGraph) -> CostReport {
    let mut report = CostReport::default();
    for (pos, node) in graph.nodes().iter().enumerate() {
        let ops = match &node.kind {
            LayerKind::Conv(p) => {
                let out = graph.shape_at(pos);
                let macs = out.area() * p.out_channels * p.fan_in_channels() * p.kernel * p.kernel;
                2 * macs as u64
            }
            LayerKind::Linear(p) => 2 * (p.in_features * p.out_features) as u64,
            _ => continue,
        };
        report.per_layer_ops.insert(node.id.clone(), ops);
        report.total_ops += ops;
    }
    report.total_giga_ops = report.total_ops as f64 / 1e9;
    report
}
