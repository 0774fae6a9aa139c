//! Portable graph representation of a CNN.
//!
//! A [`ModelGraph`] is a validated DAG of typed layers. Nodes are kept in a
//! canonical topological order (ready nodes are emitted in lexicographic id
//! order), so two graphs with the same content compare equal regardless of the
//! order their nodes were supplied in.

mod cost;
mod doc;
mod shape;

pub use cost::{count_ops, count_params, CostReport};
pub(crate) use cost::layer_params_for_counts;
pub use doc::{canonical_json, parse_model, serialize_model};
pub use shape::{infer_shapes, ShapeMap};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved producer id that refers to the graph input.
pub const GRAPH_INPUT: &str = "input";

/// Dimensions of a feature map `(c, h, w)`, a conv weight `(n, m, k, k)` or a
/// linear weight `(out, in)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Schema(format!("invalid tensor shape {dims:?}")));
        }
        Ok(TensorShape(dims))
    }

    pub fn feature_map(c: usize, h: usize, w: usize) -> Self {
        TensorShape(vec![c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn channels(&self) -> usize {
        self.0[0]
    }

    pub fn height(&self) -> usize {
        self.0.get(1).copied().unwrap_or(1)
    }

    pub fn width(&self) -> usize {
        self.0.get(2).copied().unwrap_or(1)
    }

    /// Spatial area `h * w` of a feature map.
    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvParams {
    /// Plain (groups = 1) convolution.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvParams {
            out_channels,
            in_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            has_bias: false,
        }
    }

    /// Depthwise convolution over `channels` feature maps.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvParams {
            out_channels: channels,
            in_channels: channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: channels,
            has_bias: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Structural depthwise test; single-channel depthwise convs are only
    /// identifiable through the `depthwise` tag.
    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels
    }

    /// Input channels seen by each filter, `m / groups`.
    pub fn fan_in_channels(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.fan_in_channels(),
            self.kernel,
            self.kernel,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormParams {
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            channels,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvParams),
    BatchNorm(BatchNormParams),
    ReLU,
    MaxPool(PoolParams),
    GlobalAvgPool,
    Linear(LinearParams),
    Add,
    Concat,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "Conv",
            LayerKind::BatchNorm(_) => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool(_) => "MaxPool",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Linear(_) => "Linear",
            LayerKind::Add => "Add",
            LayerKind::Concat => "Concat",
            LayerKind::Flatten => "Flatten",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvParams> {
        match self {
            LayerKind::Conv(p) => Some(p),
            _ => None,
        }
    }
}

/// Structural role tags attached to nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Annotation {
    ResidualFinal,
    ResidualDown,
    ResidualGroup(u32),
    Depthwise,
    FireSqueeze,
    FireExpand,
    Plain,
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Annotation::ResidualFinal => f.write_str("residual_final"),
            Annotation::ResidualDown => f.write_str("residual_down"),
            Annotation::ResidualGroup(g) => write!(f, "residual_group:{g}"),
            Annotation::Depthwise => f.write_str("depthwise"),
            Annotation::FireSqueeze => f.write_str("fire_squeeze"),
            Annotation::FireExpand => f.write_str("fire_expand"),
            Annotation::Plain => f.write_str("plain"),
        }
    }
}

impl FromStr for Annotation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "residual_final" => Annotation::ResidualFinal,
            "residual_down" => Annotation::ResidualDown,
            "depthwise" => Annotation::Depthwise,
            "fire_squeeze" => Annotation::FireSqueeze,
            "fire_expand" => Annotation::FireExpand,
            "plain" => Annotation::Plain,
            other => {
                let gid = other
                    .strip_prefix("residual_group:")
                    .ok_or_else(|| format!("unknown annotation '{other}'"))?;
                let gid = gid
                    .parse::<u32>()
                    .map_err(|_| format!("bad residual group id in '{other}'"))?;
                Annotation::ResidualGroup(gid)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub annotations: BTreeSet<Annotation>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerNode {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            annotations: BTreeSet::new(),
        }
    }

    pub fn tagged(mut self, tags: &[Annotation]) -> Self {
        self.annotations.extend(tags.iter().copied());
        self
    }

    pub fn has(&self, tag: Annotation) -> bool {
        self.annotations.contains(&tag)
    }

    pub fn residual_group(&self) -> Option<u32> {
        self.annotations.iter().find_map(|a| match a {
            Annotation::ResidualGroup(g) => Some(*g),
            _ => None,
        })
    }
}

/// A validated CNN topology.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    name: String,
    input_shape: TensorShape,
    num_classes: usize,
    nodes: Vec<LayerNode>,
    index: HashMap<String, usize>,
    shapes: Vec<TensorShape>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
            && self.nodes == other.nodes
    }
}

impl ModelGraph {
    /// Validates and canonicalizes a graph. Nodes may be given in any order.
    pub fn new(
        name: impl Into<String>,
        input_shape: TensorShape,
        num_classes: usize,
        nodes: Vec<LayerNode>,
    ) -> Result<Self> {
        let name = name.into();
        if input_shape.dims().len() != 3 {
            return Err(Error::Schema(format!(
                "input_shape must be [c, h, w], got {input_shape}"
            )));
        }
        if num_classes == 0 {
            return Err(Error::Schema("num_classes must be positive".into()));
        }
        if nodes.is_empty() {
            return Err(Error::Schema("graph has no nodes".into()));
        }
        for node in &nodes {
            check_node_local(node)?;
        }
        let nodes = topo_sort(nodes)?;
        let index: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();

        let mut consumed = vec![false; nodes.len()];
        for node in &nodes {
            for inp in &node.inputs {
                if let Some(&j) = index.get(inp) {
                    consumed[j] = true;
                }
            }
        }
        let sinks: Vec<&str> = nodes
            .iter()
            .zip(&consumed)
            .filter(|(_, c)| !**c)
            .map(|(n, _)| n.id.as_str())
            .collect();
        if sinks.len() != 1 {
            return Err(Error::validation(
                sinks.first().copied().unwrap_or(""),
                format!("graph must have exactly one output, found {sinks:?}"),
            ));
        }

        let shapes = shape::infer_node_shapes(&nodes, &index, &input_shape)?;
        let out = shapes.last().expect("non-empty");
        if out.dims() != [num_classes, 1, 1] {
            return Err(Error::shape(
                sinks[0],
                format!("graph output has shape {out}, expected [{num_classes}, 1, 1]"),
            ));
        }

        Ok(ModelGraph {
            name,
            input_shape,
            num_classes,
            nodes,
            index,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &TensorShape {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Nodes in canonical topological order.
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Output shape of the node at `pos` (inferred at construction).
    pub fn shape_at(&self, pos: usize) -> &TensorShape {
        &self.shapes[pos]
    }

    pub fn output_shape(&self, id: &str) -> Option<&TensorShape> {
        self.position(id).map(|i| &self.shapes[i])
    }

    /// Shape of whatever feeds a given input slot, including the graph input.
    pub fn producer_shape(&self, producer: &str) -> &TensorShape {
        if producer == GRAPH_INPUT {
            &self.input_shape
        } else {
            &self.shapes[self.index[producer]]
        }
    }

    /// Consumer positions of every node, in topological order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if let Some(&j) = self.index.get(inp) {
                    if !out[j].contains(&i) {
                        out[j].push(i);
                    }
                }
            }
        }
        out
    }

    pub fn conv_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv(_)))
            .map(|n| n.id.as_str())
    }

    /// Same topology with the node list replaced (re-validated).
    pub fn with_nodes(&self, nodes: Vec<LayerNode>) -> Result<Self> {
        ModelGraph::new(
            self.name.clone(),
            self.input_shape.clone(),
            self.num_classes,
            nodes,
        )
    }

    pub fn into_parts(self) -> (String, TensorShape, usize, Vec<LayerNode>) {
        (self.name, self.input_shape, self.num_classes, self.nodes)
    }
}

fn check_node_local(node: &LayerNode) -> Result<()> {
    let id = node.id.as_str();
    if id.is_empty() || id == GRAPH_INPUT {
        return Err(Error::validation(id, "reserved or empty node id"));
    }
    let arity = node.inputs.len();
    match &node.kind {
        LayerKind::Add if arity != 2 => {
            return Err(Error::validation(id, format!("Add needs 2 inputs, has {arity}")))
        }
        LayerKind::Concat if arity < 2 => {
            return Err(Error::validation(
                id,
                format!("Concat needs at least 2 inputs, has {arity}"),
            ))
        }
        LayerKind::Add | LayerKind::Concat => {}
        _ if arity != 1 => {
            return Err(Error::validation(
                id,
                format!("{} takes exactly 1 input, has {arity}", node.kind.name()),
            ))
        }
        _ => {}
    }

    match &node.kind {
        LayerKind::Conv(p) => {
            if [p.out_channels, p.in_channels, p.kernel, p.stride, p.groups].contains(&0) {
                return Err(Error::validation(id, "conv parameters must be positive"));
            }
            let tagged = node.has(Annotation::Depthwise);
            if tagged {
                if p.groups != p.in_channels || p.out_channels != p.in_channels {
                    return Err(Error::validation(
                        id,
                        "'depthwise' tag requires groups = in_channels = out_channels",
                    ));
                }
            } else if p.groups != 1 {
                let msg = if p.is_depthwise() {
                    "depthwise conv must carry the 'depthwise' tag"
                } else {
                    "grouped convolutions other than depthwise are not supported"
                };
                return Err(Error::validation(id, msg));
            }
        }
        LayerKind::BatchNorm(p) => {
            if p.channels == 0 || !(p.epsilon > 0.0) || !(0.0..=1.0).contains(&p.momentum) {
                return Err(Error::validation(id, "bad BatchNorm parameters"));
            }
        }
        LayerKind::MaxPool(p) => {
            if p.kernel == 0 || p.stride == 0 {
                return Err(Error::validation(id, "pool parameters must be positive"));
            }
        }
        LayerKind::Linear(p) => {
            if p.in_features == 0 || p.out_features == 0 {
                return Err(Error::validation(id, "linear features must be positive"));
            }
        }
        _ => {}
    }

    let is_conv = matches!(node.kind, LayerKind::Conv(_));
    let groups = node
        .annotations
        .iter()
        .filter(|a| matches!(a, Annotation::ResidualGroup(_)))
        .count();
    let residual_role =
        node.has(Annotation::ResidualFinal) || node.has(Annotation::ResidualDown);
    for tag in &node.annotations {
        let conv_only = !matches!(tag, Annotation::Plain);
        if conv_only && !is_conv {
            return Err(Error::validation(
                id,
                format!("tag '{tag}' is only valid on Conv nodes"),
            ));
        }
    }
    if node.has(Annotation::ResidualFinal) && node.has(Annotation::ResidualDown) {
        return Err(Error::validation(id, "node cannot be both residual_final and residual_down"));
    }
    if residual_role && groups != 1 {
        return Err(Error::validation(
            id,
            "residual_final/residual_down need exactly one residual_group:<gid> tag",
        ));
    }
    if !residual_role && groups > 0 {
        return Err(Error::validation(
            id,
            "residual_group tag without residual_final/residual_down",
        ));
    }
    Ok(())
}

/// Kahn's algorithm; among ready nodes the lexicographically smallest id goes
/// first.
fn topo_sort(nodes: Vec<LayerNode>) -> Result<Vec<LayerNode>> {
    let mut by_id: BTreeMap<String, LayerNode> = BTreeMap::new();
    for node in nodes {
        let id = node.id.clone();
        if by_id.insert(id.clone(), node).is_some() {
            return Err(Error::validation(id, "duplicate node id"));
        }
    }
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, node) in &by_id {
        let mut deg = 0;
        for inp in &node.inputs {
            if inp == GRAPH_INPUT {
                continue;
            }
            if !by_id.contains_key(inp) {
                return Err(Error::validation(
                    id.as_str(),
                    format!("input '{inp}' does not exist"),
                ));
            }
            deg += 1;
            consumers.entry(inp.as_str()).or_default().push(id.as_str());
        }
        indegree.insert(id.as_str(), deg);
    }
    let mut ready: BinaryHeap<Reverse<&str>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order: Vec<String> = Vec::with_capacity(by_id.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id.to_string());
        if let Some(cs) = consumers.get(id) {
            for &c in cs {
                let d = indegree.get_mut(c).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
    }
    if order.len() != by_id.len() {
        let stuck = indegree
            .iter()
            .find(|(_, &d)| d > 0)
            .map(|(&id, _)| id.to_string())
            .unwrap_or_default();
        return Err(Error::validation(stuck, "graph contains a cycle"));
    }
    if !by_id
        .values()
        .any(|n| n.inputs.iter().any(|i| i == GRAPH_INPUT))
    {
        return Err(Error::validation("", "no node reads the graph input"));
    }
    Ok(order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("sorted id"))
        .collect())
}
