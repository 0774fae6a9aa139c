use std::collections::{BTreeMap, HashMap};

use super::{LayerKind, LayerNode, ModelGraph, TensorShape, GRAPH_INPUT};
use crate::error::{Error, Result};

pub type ShapeMap = BTreeMap<String, TensorShape>;

/// Output feature-map shape of every node.
pub fn infer_shapes(graph: &ModelGraph) -> Result<ShapeMap> {
    let shapes = infer_node_shapes(graph.nodes(), &graph.index, graph.input_shape())?;
    Ok(graph
        .nodes()
        .iter()
        .zip(shapes)
        .map(|(n, s)| (n.id.clone(), s))
        .collect())
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// `nodes` must already be topologically ordered.
pub(crate) fn infer_node_shapes(
    nodes: &[LayerNode],
    index: &HashMap<String, usize>,
    input_shape: &TensorShape,
) -> Result<Vec<TensorShape>> {
    let mut shapes: Vec<TensorShape> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let inputs: Vec<&TensorShape> = node
            .inputs
            .iter()
            .map(|p| {
                if p == GRAPH_INPUT {
                    input_shape
                } else {
                    &shapes[index[p]]
                }
            })
            .collect();
        let out = node_shape(node, &inputs)?;
        shapes.push(out);
    }
    Ok(shapes)
}

fn node_shape(node: &LayerNode, inputs: &[&TensorShape]) -> Result<TensorShape> {
    let id = node.id.as_str();
    let x = inputs[0];
    let (c, h, w) = (x.channels(), x.height(), x.width());
    match &node.kind {
        LayerKind::Conv(p) => {
            if c != p.in_channels {
                return Err(Error::shape(
                    id,
                    format!("input has {c} channels but conv declares in_channels = {}", p.in_channels),
                ));
            }
            let ho = conv_out_extent(h, p.kernel, p.stride, p.padding);
            let wo = conv_out_extent(w, p.kernel, p.stride, p.padding);
            match (ho, wo) {
                (Some(ho), Some(wo)) => Ok(TensorShape::feature_map(p.out_channels, ho, wo)),
                _ => Err(Error::shape(id, format!("kernel {} larger than padded input {x}", p.kernel))),
            }
        }
        LayerKind::BatchNorm(p) => {
            if c != p.channels {
                return Err(Error::shape(
                    id,
                    format!("input has {c} channels but BatchNorm declares {}", p.channels),
                ));
            }
            Ok(x.clone())
        }
        LayerKind::ReLU => Ok(x.clone()),
        LayerKind::MaxPool(p) => {
            match (
                conv_out_extent(h, p.kernel, p.stride, 0),
                conv_out_extent(w, p.kernel, p.stride, 0),
            ) {
                (Some(ho), Some(wo)) => Ok(TensorShape::feature_map(c, ho, wo)),
                _ => Err(Error::shape(id, format!("pool kernel {} larger than input {x}", p.kernel))),
            }
        }
        LayerKind::GlobalAvgPool => Ok(TensorShape::feature_map(c, 1, 1)),
        LayerKind::Flatten => Ok(TensorShape::feature_map(x.numel(), 1, 1)),
        LayerKind::Linear(p) => {
            if x.numel() != p.in_features {
                return Err(Error::shape(
                    id,
                    format!("input has {} features but Linear declares {}", x.numel(), p.in_features),
                ));
            }
            Ok(TensorShape::feature_map(p.out_features, 1, 1))
        }
        LayerKind::Add => {
            if inputs[0] != inputs[1] {
                return Err(Error::shape(
                    id,
                    format!("Add inputs disagree: {} vs {}", inputs[0], inputs[1]),
                ));
            }
            Ok(x.clone())
        }
        LayerKind::Concat => {
            let mut channels = 0;
            for s in inputs {
                if s.height() != h || s.width() != w {
                    return Err(Error::shape(
                        id,
                        format!("Concat inputs disagree spatially: {x} vs {s}"),
                    ));
                }
                channels += s.channels();
            }
            Ok(TensorShape::feature_map(channels, h, w))
        }
    }
}
