//! Pruning dependency calculation.
//!
//! Two coupling rules, both derived from graph structure and cross-checked
//! against annotations:
//!
//! * **residual**: every conv whose output channels meet at an `Add` must lose
//!   the same filter indices. The connected component is checked against the
//!   `residual_final` / `residual_down` / `residual_group:<gid>` tags.
//! * **depthwise**: a depthwise conv and every conv defining its input feature
//!   maps must lose the same indices.
//!
//! Overlapping sets are merged. Convs whose channels cannot change (they reach
//! the graph output directly, or are coupled to the graph input) are reported
//! as unprunable, as are residual members under [`ResidualPolicy::SkipFinal`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Annotation, LayerKind, ModelGraph, GRAPH_INPUT};
use crate::prune::PrunePlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualPolicy {
    /// Tie all final convs of a residual group to its down-sampling conv.
    #[default]
    TieGroup,
    /// Leave residual final/down convs unpruned.
    SkipFinal,
}

impl fmt::Display for ResidualPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualPolicy::TieGroup => "tie-group",
            ResidualPolicy::SkipFinal => "skip-final",
        })
    }
}

impl FromStr for ResidualPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tie-group" | "tie_group" => Ok(ResidualPolicy::TieGroup),
            "skip-final" | "skip_final" => Ok(ResidualPolicy::SkipFinal),
            other => Err(Error::Config(format!("unknown residual policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Residual,
    Depthwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencySet {
    pub members: BTreeSet<String>,
    pub coupling: Coupling,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_id: Option<u32>,
}

impl DependencySet {
    /// Lexicographically smallest member; used as the set's ranking key.
    pub fn key(&self) -> &str {
        self.members.iter().next().expect("non-empty set")
    }
}

/// One downstream use of a producer channel: input indices
/// `input_channel * expansion .. (input_channel + 1) * expansion` of
/// `consumer`. `expansion` is 1 for convs and `H*W` for a linear layer fed by a
/// channel-major flatten of an `H x W` map.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConsumerRef {
    pub consumer: String,
    pub input_channel: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMap {
    pub policy: ResidualPolicy,
    pub sets: Vec<DependencySet>,
    pub unprunable: BTreeSet<String>,
    pub consumer_map: BTreeMap<(String, usize), Vec<ConsumerRef>>,
}

impl DependencyMap {
    pub fn set_of(&self, layer: &str) -> Option<usize> {
        self.sets.iter().position(|s| s.members.contains(layer))
    }

    pub fn is_prunable(&self, layer: &str) -> bool {
        !self.unprunable.contains(layer)
    }

    /// Canonical `analyze` report document.
    pub fn report(&self) -> DependencyReport {
        DependencyReport {
            residual_policy: self.policy,
            sets: self.sets.clone(),
            unprunable: self.unprunable.iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyReport {
    pub residual_policy: ResidualPolicy,
    pub sets: Vec<DependencySet>,
    pub unprunable: Vec<String>,
}

/// Where a channel range currently lives while tracing forward.
#[derive(Clone, Copy)]
struct Span {
    pos: usize,
    start: usize,
    len: usize,
}

/// Forward-trace channel `channel` of node `pos`; returns the consumers and
/// whether the channel reaches the graph output unconsumed.
fn trace_channel(
    graph: &ModelGraph,
    consumers: &[Vec<usize>],
    pos: usize,
    channel: usize,
) -> (Vec<ConsumerRef>, bool) {
    let mut refs = Vec::new();
    let mut reaches_output = false;
    let mut stack = vec![Span {
        pos,
        start: channel,
        len: 1,
    }];
    let nodes = graph.nodes();
    while let Some(span) = stack.pop() {
        let producer = &nodes[span.pos].id;
        if consumers[span.pos].is_empty() {
            reaches_output = true;
        }
        for &c in &consumers[span.pos] {
            let node = &nodes[c];
            for (slot, inp) in node.inputs.iter().enumerate() {
                if inp != producer {
                    continue;
                }
                let in_shape = graph.producer_shape(inp);
                match &node.kind {
                    LayerKind::Conv(_) => refs.push(ConsumerRef {
                        consumer: node.id.clone(),
                        input_channel: span.start,
                        expansion: span.len,
                    }),
                    LayerKind::Linear(_) => {
                        let area = in_shape.area();
                        let len = span.len * area;
                        refs.push(ConsumerRef {
                            consumer: node.id.clone(),
                            input_channel: span.start * area / len,
                            expansion: len,
                        });
                    }
                    LayerKind::Concat => {
                        let offset: usize = node.inputs[..slot]
                            .iter()
                            .map(|p| graph.producer_shape(p).channels())
                            .sum();
                        stack.push(Span {
                            pos: c,
                            start: span.start + offset,
                            len: span.len,
                        });
                    }
                    LayerKind::Flatten => {
                        let area = in_shape.area();
                        stack.push(Span {
                            pos: c,
                            start: span.start * area,
                            len: span.len * area,
                        });
                    }
                    _ => stack.push(Span { pos: c, ..span }),
                }
            }
        }
    }
    refs.sort();
    refs.dedup();
    (refs, reaches_output)
}

/// Convs whose filters define the channels flowing out of `producer`,
/// looking backwards through channel-preserving layers and `Add`.
enum Sources {
    Convs(BTreeSet<String>),
    /// Channels come from the graph input.
    GraphInput,
}

fn channel_sources(graph: &ModelGraph, producer: &str, context: &str) -> Result<Sources> {
    let mut out = BTreeSet::new();
    let mut stack = vec![producer.to_string()];
    let mut from_input = false;
    while let Some(id) = stack.pop() {
        if id == GRAPH_INPUT {
            from_input = true;
            continue;
        }
        let node = graph.node(&id).expect("validated graph");
        match &node.kind {
            LayerKind::Conv(_) => {
                out.insert(id);
            }
            LayerKind::BatchNorm(_)
            | LayerKind::ReLU
            | LayerKind::MaxPool(_)
            | LayerKind::GlobalAvgPool
            | LayerKind::Add => stack.extend(node.inputs.iter().cloned()),
            LayerKind::Concat | LayerKind::Flatten | LayerKind::Linear(_) => {
                return Err(Error::dependency(
                    context,
                    format!(
                        "channel coupling through {} node '{}' is not supported",
                        node.kind.name(),
                        node.id
                    ),
                ));
            }
        }
    }
    Ok(if from_input {
        Sources::GraphInput
    } else {
        Sources::Convs(out)
    })
}

struct UnionFind {
    parent: BTreeMap<String, String>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind {
            parent: BTreeMap::new(),
        }
    }

    fn find(&mut self, x: &str) -> String {
        let p = self
            .parent
            .entry(x.to_string())
            .or_insert_with(|| x.to_string())
            .clone();
        if p == x {
            return p;
        }
        let root = self.find(&p);
        self.parent.insert(x.to_string(), root.clone());
        root
    }

    fn union(&mut self, a: &str, b: &str) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller id becomes the root, keeps output deterministic
            let (root, child) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(child, root);
        }
    }

    fn components(&mut self) -> BTreeMap<String, BTreeSet<String>> {
        let keys: Vec<String> = self.parent.keys().cloned().collect();
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for k in keys {
            let r = self.find(&k);
            out.entry(r).or_default().insert(k);
        }
        out
    }
}

/// Derives the dependency sets, unprunable layers and channel-consumer map.
pub fn compute_dependencies(graph: &ModelGraph, policy: ResidualPolicy) -> Result<DependencyMap> {
    let consumers = graph.consumers();
    let mut unprunable: BTreeSet<String> = BTreeSet::new();

    let mut consumer_map = BTreeMap::new();
    for (pos, node) in graph.nodes().iter().enumerate() {
        let LayerKind::Conv(p) = &node.kind else {
            continue;
        };
        for ch in 0..p.out_channels {
            let (refs, reaches_output) = trace_channel(graph, &consumers, pos, ch);
            if reaches_output {
                unprunable.insert(node.id.clone());
            }
            consumer_map.insert((node.id.clone(), ch), refs);
        }
    }

    // Residual coupling: union the channel sources of both inputs of each Add.
    let mut residual = UnionFind::new();
    let mut input_coupled: BTreeSet<String> = BTreeSet::new();
    for node in graph.nodes() {
        if !matches!(node.kind, LayerKind::Add) {
            continue;
        }
        let mut all = BTreeSet::new();
        let mut touches_input = false;
        for inp in &node.inputs {
            match channel_sources(graph, inp, &node.id)? {
                Sources::Convs(s) => all.extend(s),
                Sources::GraphInput => touches_input = true,
            }
        }
        let mut it = all.iter();
        if let Some(first) = it.next() {
            residual.find(first);
            for other in it {
                residual.union(first, other);
            }
        }
        if touches_input {
            input_coupled.extend(all);
        }
    }

    let mut sets: Vec<(BTreeSet<String>, Coupling, Option<u32>)> = Vec::new();
    let mut residual_members: BTreeSet<String> = BTreeSet::new();
    for (_, members) in residual.components() {
        let gid = check_residual_tags(graph, &members)?;
        residual_members.extend(members.iter().cloned());
        match policy {
            ResidualPolicy::TieGroup => sets.push((members, Coupling::Residual, Some(gid))),
            ResidualPolicy::SkipFinal => unprunable.extend(members),
        }
    }
    // Tagged residual convs must actually meet at an Add.
    for node in graph.nodes() {
        let tagged = node.has(Annotation::ResidualFinal) || node.has(Annotation::ResidualDown);
        if tagged && !residual_members.contains(&node.id) {
            return Err(Error::dependency(
                &node.id,
                "tagged as a residual conv but its output never reaches an Add",
            ));
        }
    }
    unprunable.extend(input_coupled);

    for node in graph.nodes() {
        if !node.has(Annotation::Depthwise) {
            continue;
        }
        let mut members = BTreeSet::from([node.id.clone()]);
        match channel_sources(graph, &node.inputs[0], &node.id)? {
            Sources::Convs(s) => members.extend(s),
            Sources::GraphInput => {
                unprunable.insert(node.id.clone());
            }
        }
        sets.push((members, Coupling::Depthwise, None));
    }

    // Merge overlapping sets transitively.
    let mut uf = UnionFind::new();
    for (members, _, _) in &sets {
        let mut it = members.iter();
        let first = it.next().expect("non-empty");
        uf.find(first);
        for m in it {
            uf.union(first, m);
        }
    }
    let mut merged: BTreeMap<String, DependencySet> = BTreeMap::new();
    for (members, coupling, gid) in sets {
        let root = uf.find(members.iter().next().expect("non-empty"));
        let entry = merged.entry(root).or_insert_with(|| DependencySet {
            members: BTreeSet::new(),
            coupling,
            group_id: None,
        });
        entry.members.extend(members);
        if coupling == Coupling::Residual {
            entry.coupling = Coupling::Residual;
            entry.group_id = match (entry.group_id, gid) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
    }

    let mut out_sets = Vec::new();
    for (_, set) in merged {
        let widths: BTreeSet<usize> = set
            .members
            .iter()
            .map(|m| graph.node(m).and_then(|n| n.kind.as_conv()).map(|p| p.out_channels))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::dependency(set.key(), "dependency set member is not a conv"))?;
        if widths.len() != 1 {
            return Err(Error::dependency(
                set.key(),
                format!("coupled convs disagree on filter count: {widths:?}"),
            ));
        }
        if set.members.iter().any(|m| unprunable.contains(m)) {
            unprunable.extend(set.members.iter().cloned());
        } else {
            out_sets.push(set);
        }
    }
    out_sets.sort_by(|a, b| a.key().cmp(b.key()));

    Ok(DependencyMap {
        policy,
        sets: out_sets,
        unprunable,
        consumer_map,
    })
}

fn check_residual_tags(graph: &ModelGraph, members: &BTreeSet<String>) -> Result<u32> {
    let mut gids = BTreeSet::new();
    let mut downs = 0;
    for m in members {
        let node = graph.node(m).expect("member exists");
        let is_final = node.has(Annotation::ResidualFinal);
        let is_down = node.has(Annotation::ResidualDown);
        if !is_final && !is_down {
            return Err(Error::dependency(
                m,
                "conv output feeds an Add but is not tagged residual_final or residual_down",
            ));
        }
        if is_down {
            downs += 1;
        }
        gids.insert(node.residual_group().expect("validated tags"));
    }
    let first = members.iter().next().expect("non-empty");
    if gids.len() != 1 {
        return Err(Error::dependency(
            first,
            format!("convs coupled through Add carry different residual groups {gids:?}"),
        ));
    }
    if downs == 0 {
        return Err(Error::dependency(
            first,
            "residual group has no residual_down conv",
        ));
    }
    Ok(*gids.iter().next().expect("one gid"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// `index` is removed from some members of set `set` but kept in others.
    Uncoupled { set: usize, index: usize },
    /// The plan removes filters from a layer that must not be pruned.
    Unprunable { layer: String },
}

/// Checks that every coupled index is removed from all members of its set.
pub fn validate_plan_against_deps(
    depmap: &DependencyMap,
    plan: &PrunePlan,
) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    for (layer, idx) in &plan.removals {
        if !idx.is_empty() && depmap.unprunable.contains(layer) {
            violations.push(Violation::Unprunable {
                layer: layer.clone(),
            });
        }
    }
    for (si, set) in depmap.sets.iter().enumerate() {
        let removed: Vec<BTreeSet<usize>> = set
            .members
            .iter()
            .map(|m| {
                plan.removals
                    .get(m)
                    .map(|v| v.iter().copied().collect())
                    .unwrap_or_default()
            })
            .collect();
        let union: BTreeSet<usize> = removed.iter().flatten().copied().collect();
        for index in union {
            if removed.iter().any(|r| !r.contains(&index)) {
                violations.push(Violation::Uncoupled { set: si, index });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
