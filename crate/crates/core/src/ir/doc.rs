//! JSON form of the IR.
//!
//! Canonical form: UTF-8, two-space indentation, object keys sorted, nodes in
//! canonical topological order, empty annotation sets omitted, trailing newline.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    Annotation, BatchNormParams, ConvParams, LayerKind, LayerNode, LinearParams, ModelGraph,
    PoolParams, TensorShape,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    name: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: String,
    inputs: Vec<String>,
    #[serde(default)]
    params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<String>>,
}

/// Serializes any value with sorted keys and two-space indentation.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // Value's map is a BTreeMap, so converting first sorts every object.
    let value = serde_json::to_value(value).expect("serializable document");
    let mut text = serde_json::to_string_pretty(&value).expect("serializable value");
    text.push('\n');
    text
}

pub fn serialize_model(graph: &ModelGraph) -> String {
    let doc = GraphDoc {
        name: graph.name().to_string(),
        input_shape: graph.input_shape().dims().to_vec(),
        num_classes: graph.num_classes(),
        nodes: graph.nodes().iter().map(node_doc).collect(),
    };
    canonical_json(&doc)
}

fn node_doc(node: &LayerNode) -> NodeDoc {
    let params = match &node.kind {
        LayerKind::Conv(p) => serde_json::to_value(p),
        LayerKind::BatchNorm(p) => serde_json::to_value(p),
        LayerKind::MaxPool(p) => serde_json::to_value(p),
        LayerKind::Linear(p) => serde_json::to_value(p),
        _ => Ok(Value::Object(Default::default())),
    }
    .expect("params serialize");
    let annotations = if node.annotations.is_empty() {
        None
    } else {
        Some(node.annotations.iter().map(Annotation::to_string).collect())
    };
    NodeDoc {
        id: node.id.clone(),
        kind: node.kind.name().to_string(),
        inputs: node.inputs.clone(),
        params,
        annotations,
    }
}

pub fn parse_model(text: &str) -> Result<ModelGraph> {
    let doc: GraphDoc =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("model document: {e}")))?;
    let input_shape = TensorShape::new(doc.input_shape)?;
    let nodes = doc
        .nodes
        .into_iter()
        .map(parse_node)
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(doc.name, input_shape, doc.num_classes, nodes)
}

fn params<T: serde::de::DeserializeOwned>(id: &str, value: Value) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| Error::Schema(format!("node '{id}': bad params: {e}")))
}

fn parse_node(doc: NodeDoc) -> Result<LayerNode> {
    let id = doc.id;
    let empty = match &doc.params {
        Value::Null => true,
        Value::Object(m) => m.is_empty(),
        _ => false,
    };
    let kind = match doc.kind.as_str() {
        "Conv" => LayerKind::Conv(params::<ConvParams>(&id, doc.params)?),
        "BatchNorm" => LayerKind::BatchNorm(params::<BatchNormParams>(&id, doc.params)?),
        "MaxPool" => LayerKind::MaxPool(params::<PoolParams>(&id, doc.params)?),
        "Linear" => LayerKind::Linear(params::<LinearParams>(&id, doc.params)?),
        other => {
            if !empty {
                return Err(Error::Schema(format!("node '{id}': {other} takes no params")));
            }
            match other {
                "ReLU" => LayerKind::ReLU,
                "GlobalAvgPool" => LayerKind::GlobalAvgPool,
                "Add" => LayerKind::Add,
                "Concat" => LayerKind::Concat,
                "Flatten" => LayerKind::Flatten,
                _ => return Err(Error::Schema(format!("node '{id}': unknown kind '{other}'"))),
            }
        }
    };
    let mut node = LayerNode {
        id,
        kind,
        inputs: doc.inputs,
        annotations: Default::default(),
    };
    for tag in doc.annotations.unwrap_or_default() {
        let tag = tag
            .parse::<Annotation>()
            .map_err(|e| Error::validation(node.id.clone(), e))?;
        node.annotations.insert(tag);
    }
    Ok(node)
}
