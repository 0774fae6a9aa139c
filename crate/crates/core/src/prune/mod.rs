//! L1-norm filter ranking and dependency-aware prune planning.
//!
//! Filters are removed one at a time, lowest score first, until the removed
//! fraction of learnable-parameter memory reaches the target level. A removal
//! takes out the filter's weights and bias, its BatchNorm slice, and the input
//! channels (or flattened linear columns) it feeds downstream. Coupled filters
//! (see [`crate::deps`]) are removed together and ranked by the mean of their
//! members' L1 norms.

mod shrink;

pub use shrink::{shrink_graph, transfer_weights, ChannelRemap, LayerRemap, RemapKind};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::deps::DependencyMap;
use crate::error::{Error, Result};
use crate::ir::{layer_params_for_counts, LayerKind, ModelGraph};
use crate::tensor::{tensor_name, Scalar, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingScope {
    #[default]
    Global,
    PerLayer,
}

impl fmt::Display for RankingScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingScope::Global => "global",
            RankingScope::PerLayer => "per-layer",
        })
    }
}

impl FromStr for RankingScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RankingScope::Global),
            "per-layer" | "per_layer" => Ok(RankingScope::PerLayer),
            other => Err(Error::Config(format!("unknown ranking scope '{other}'"))),
        }
    }
}

/// L1 score of one prunable filter index. For a coupled set the score is the
/// mean over members, `layer_id` is the set's smallest member id and
/// `group_key` its position in [`DependencyMap::sets`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub layer_id: String,
    pub filter_index: usize,
    pub score: f64,
    pub group_key: Option<usize>,
}

fn rank_order(a: &FilterScore, b: &FilterScore) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| a.layer_id.cmp(&b.layer_id))
        .then_with(|| a.filter_index.cmp(&b.filter_index))
}

/// One pruning step: filter `index` removed from every layer in `layers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub layers: Vec<String>,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Layer id to ascending filter indices to remove.
    pub removals: BTreeMap<String, Vec<usize>>,
    pub target_level: f64,
    pub achieved_level: f64,
    pub ranking_scope: RankingScope,
    #[serde(default)]
    pub params_before: u64,
    #[serde(default)]
    pub params_after: u64,
    /// Removal order; not part of the serialized document.
    #[serde(skip)]
    pub steps: Vec<PlanStep>,
}

impl PrunePlan {
    /// A plan from explicit removals; the level is recomputed from the census.
    pub fn from_removals(
        graph: &ModelGraph,
        removals: BTreeMap<String, Vec<usize>>,
        ranking_scope: RankingScope,
    ) -> Result<Self> {
        let mut census = Census::new(graph);
        let before = census.total();
        let mut clean = BTreeMap::new();
        for (layer, mut idx) in removals {
            idx.sort_unstable();
            idx.dedup();
            if idx.is_empty() {
                continue;
            }
            let pos = graph
                .position(&layer)
                .filter(|&p| matches!(graph.nodes()[p].kind, LayerKind::Conv(_)))
                .ok_or_else(|| Error::shape(&layer, "plan entry does not name a conv layer"))?;
            census.set_removed(pos, idx.len().min(census.original[pos]));
            clean.insert(layer, idx);
        }
        let after = census.total();
        let level = level_of(before, after);
        Ok(PrunePlan {
            removals: clean,
            target_level: level,
            achieved_level: level,
            ranking_scope,
            params_before: before,
            params_after: after,
            steps: Vec::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.removals.values().all(|v| v.is_empty())
    }

    pub fn removed(&self, layer: &str) -> &[usize] {
        self.removals.get(layer).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn to_json(&self) -> String {
        crate::ir::canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PrunePlan =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("plan document: {e}")))?;
        for (layer, idx) in &plan.removals {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Schema(format!(
                    "plan removals for '{layer}' must be strictly ascending"
                )));
            }
        }
        Ok(plan)
    }
}

pub(crate) fn level_of(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before - after) as f64 / before as f64
    }
}

/// Parameter census as a function of per-conv filter counts. Spatial extents
/// never change under filter pruning, so only channel counts are tracked.
pub(crate) struct Census<'a> {
    graph: &'a ModelGraph,
    original: Vec<usize>,
    filters: Vec<usize>,
}

impl<'a> Census<'a> {
    pub(crate) fn new(graph: &'a ModelGraph) -> Self {
        let original: Vec<usize> = graph
            .nodes()
            .iter()
            .map(|n| n.kind.as_conv().map(|p| p.out_channels).unwrap_or(0))
            .collect();
        Census {
            graph,
            filters: original.clone(),
            original,
        }
    }

    pub(crate) fn set_removed(&mut self, pos: usize, removed: usize) {
        self.filters[pos] = self.original[pos] - removed;
    }

    pub(crate) fn remove_one(&mut self, pos: usize) {
        self.filters[pos] -= 1;
    }

    pub(crate) fn filters(&self, pos: usize) -> usize {
        self.filters[pos]
    }

    pub(crate) fn total(&self) -> u64 {
        let g = self.graph;
        let nodes = g.nodes();
        let mut channels = vec![0usize; nodes.len()];
        let mut total = 0;
        let input_channels = |producer: &str, channels: &[usize]| -> usize {
            match g.position(producer) {
                Some(p) => channels[p],
                None => g.input_shape().channels(),
            }
        };
        for (pos, node) in nodes.iter().enumerate() {
            let cin = input_channels(&node.inputs[0], &channels);
            let area_in = g.producer_shape(&node.inputs[0]).area();
            let (c, params) = match &node.kind {
                LayerKind::Conv(_) => {
                    let n = self.filters[pos];
                    (n, layer_params_for_counts(&node.kind, n, cin, area_in))
                }
                LayerKind::Linear(p) => (
                    p.out_features,
                    layer_params_for_counts(&node.kind, p.out_features, cin, area_in),
                ),
                LayerKind::BatchNorm(_) => (cin, layer_params_for_counts(&node.kind, cin, cin, 1)),
                LayerKind::Concat => (
                    node.inputs
                        .iter()
                        .map(|i| input_channels(i, &channels))
                        .sum(),
                    0,
                ),
                LayerKind::Flatten => (cin * area_in, 0),
                _ => (cin, 0),
            };
            channels[pos] = c;
            total += params;
        }
        total
    }
}

/// A prunable unit: one conv, or one coupled set.
#[derive(Debug, Clone)]
struct Domain {
    key: String,
    positions: Vec<usize>,
    layers: Vec<String>,
    filters: usize,
}

fn domains(graph: &ModelGraph, depmap: &DependencyMap) -> BTreeMap<String, Domain> {
    let mut out = BTreeMap::new();
    let mut grouped: BTreeSet<&str> = BTreeSet::new();
    for set in &depmap.sets {
        let layers: Vec<String> = set.members.iter().cloned().collect();
        let positions = layers
            .iter()
            .map(|l| graph.position(l).expect("member exists"))
            .collect::<Vec<_>>();
        let filters = graph.nodes()[positions[0]]
            .kind
            .as_conv()
            .expect("conv member")
            .out_channels;
        grouped.extend(set.members.iter().map(String::as_str));
        out.insert(
            set.key().to_string(),
            Domain {
                key: set.key().to_string(),
                positions,
                layers,
                filters,
            },
        );
    }
    for (pos, node) in graph.nodes().iter().enumerate() {
        let Some(p) = node.kind.as_conv() else {
            continue;
        };
        if grouped.contains(node.id.as_str()) || !depmap.is_prunable(&node.id) {
            continue;
        }
        out.insert(
            node.id.clone(),
            Domain {
                key: node.id.clone(),
                positions: vec![pos],
                layers: vec![node.id.clone()],
                filters: p.out_channels,
            },
        );
    }
    out
}

/// Per-filter L1 norms of a conv weight `(n, m/groups, k, k)`, bias excluded.
pub fn filter_l1_norms<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    layer: &str,
) -> Result<Vec<f64>> {
    let p = graph
        .node(layer)
        .and_then(|n| n.kind.as_conv())
        .ok_or_else(|| Error::shape(layer, "not a conv layer"))?;
    let name = tensor_name(layer, "weight");
    let w = weights.get(&name)?;
    let dims = p.weight_dims();
    if w.shape() != dims.as_slice() {
        return Err(Error::ShapeMismatch {
            name,
            expected: dims,
            found: w.shape().to_vec(),
        });
    }
    let per = w.numel() / p.out_channels;
    Ok(w.data()
        .chunks(per)
        .map(|f| f.iter().map(|v| v.abs().as_f64()).sum())
        .collect())
}

/// Scores every prunable filter, returned in removal order (ascending score,
/// ties by layer id then filter index).
pub fn score_filters<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    depmap: &DependencyMap,
) -> Result<Vec<FilterScore>> {
    let mut scores = Vec::new();
    for dom in domains(graph, depmap).values() {
        let norms = dom
            .layers
            .iter()
            .map(|l| filter_l1_norms(graph, weights, l))
            .collect::<Result<Vec<_>>>()?;
        let group_key = depmap.set_of(&dom.layers[0]);
        for i in 0..dom.filters {
            let mean = norms.iter().map(|n| n[i]).sum::<f64>() / norms.len() as f64;
            scores.push(FilterScore {
                layer_id: dom.key.clone(),
                filter_index: i,
                score: mean,
                group_key,
            });
        }
    }
    scores.sort_by(rank_order);
    Ok(scores)
}

/// Builds a dependency-respecting plan reaching `target_level` percent of
/// parameter memory.
///
/// Global scope removes the lowest-scoring remaining filter (or coupled group)
/// until the removed memory first reaches the target. Per-layer scope removes,
/// round-robin, the lowest-scoring filters of each layer or coupled set until
/// each has lost `target_level` percent of its own filters. Every conv keeps at
/// least one filter.
pub fn build_plan(
    graph: &ModelGraph,
    depmap: &DependencyMap,
    scores: &[FilterScore],
    target_level: f64,
    scope: RankingScope,
) -> Result<PrunePlan> {
    if !(0.0..100.0).contains(&target_level) {
        return Err(Error::Config(format!(
            "target level must be in [0, 100), got {target_level}"
        )));
    }
    let doms = domains(graph, depmap);
    let mut census = Census::new(graph);
    let before = census.total();
    let mut removals: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut steps = Vec::new();
    let mut after = before;

    let reached = |after: u64| (before - after) as f64 * 100.0 >= target_level * before as f64;

    if target_level > 0.0 {
        let mut ranked: Vec<&FilterScore> = scores.iter().collect();
        ranked.sort_by(|a, b| rank_order(a, b));
        let mut seen: BTreeSet<(&str, usize)> = BTreeSet::new();
        ranked.retain(|s| seen.insert((s.layer_id.as_str(), s.filter_index)));

        let mut apply = |dom: &Domain, index: usize, census: &mut Census| {
            for (&pos, layer) in dom.positions.iter().zip(&dom.layers) {
                census.remove_one(pos);
                removals.entry(layer.clone()).or_default().push(index);
            }
            steps.push(PlanStep {
                layers: dom.layers.clone(),
                index,
            });
        };

        match scope {
            RankingScope::Global => {
                let mut done = false;
                for s in ranked {
                    let Some(dom) = doms.get(&s.layer_id) else {
                        continue;
                    };
                    if s.filter_index >= dom.filters || census.filters(dom.positions[0]) <= 1 {
                        continue;
                    }
                    apply(dom, s.filter_index, &mut census);
                    after = census.total();
                    if reached(after) {
                        done = true;
                        break;
                    }
                }
                if !done {
                    return Err(Error::InfeasibleTarget {
                        target: target_level,
                        max_achievable: level_of(before, after),
                    });
                }
            }
            RankingScope::PerLayer => {
                let mut queues: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
                for s in &ranked {
                    if let Some(dom) = doms.get(&s.layer_id) {
                        if s.filter_index < dom.filters {
                            let quota = ((target_level / 100.0 * dom.filters as f64) - 1e-9)
                                .ceil()
                                .max(0.0) as usize;
                            let entry = queues
                                .entry(dom.key.as_str())
                                .or_insert((quota.min(dom.filters - 1), Vec::new()));
                            entry.1.push(s.filter_index);
                        }
                    }
                }
                let rounds = queues.values().map(|(q, _)| *q).max().unwrap_or(0);
                for r in 0..rounds {
                    for (key, (quota, queue)) in &queues {
                        if r < *quota && r < queue.len() {
                            apply(&doms[*key], queue[r], &mut census);
                        }
                    }
                }
                after = census.total();
            }
        }
    }

    for idx in removals.values_mut() {
        idx.sort_unstable();
    }
    Ok(PrunePlan {
        removals,
        target_level,
        achieved_level: level_of(before, after),
        ranking_scope: scope,
        params_before: before,
        params_after: after,
        steps,
    })
}
