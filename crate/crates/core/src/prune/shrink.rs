//! Model writing and weight transfer: build the physically smaller graph and
//! slice the old tensors into it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PrunePlan;
use crate::error::{Error, Result};
use crate::ir::{Annotation, LayerKind, ModelGraph};
use crate::tensor::{tensor_name, Scalar, Tensor, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemapKind {
    Conv { depthwise: bool },
    BatchNorm,
    Linear,
}

/// Surviving indices of one parameterized layer. `out_keep` lists the old
/// output channels kept, `in_keep` the old input indices kept (flattened
/// columns for a linear layer). New index = position in the list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRemap {
    pub kind: RemapKind,
    pub out_keep: Vec<usize>,
    pub in_keep: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelRemap {
    /// Surviving output channels of every node.
    pub outputs: BTreeMap<String, Vec<usize>>,
    pub layers: BTreeMap<String, LayerRemap>,
}

fn position_of(keep: &[usize], old: usize) -> Option<usize> {
    keep.binary_search(&old).ok()
}

impl ChannelRemap {
    pub fn new_output_index(&self, node: &str, old: usize) -> Option<usize> {
        self.outputs.get(node).and_then(|k| position_of(k, old))
    }

    pub fn new_input_index(&self, layer: &str, old: usize) -> Option<usize> {
        self.layers.get(layer).and_then(|l| position_of(&l.in_keep, old))
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Removes the planned filters and everything they feed, returning the new
/// graph and the index remapping used by [`transfer_weights`].
pub fn shrink_graph(graph: &ModelGraph, plan: &PrunePlan) -> Result<(ModelGraph, ChannelRemap)> {
    for (layer, idx) in &plan.removals {
        let p = graph
            .node(layer)
            .and_then(|n| n.kind.as_conv())
            .ok_or_else(|| Error::shape(layer, "plan entry does not name a conv layer"))?;
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape(layer, "plan indices must be strictly ascending"));
        }
        if idx.last().is_some_and(|&i| i >= p.out_channels) {
            return Err(Error::shape(
                layer,
                format!("plan removes filter {} of {}", idx.last().unwrap(), p.out_channels),
            ));
        }
        if idx.len() >= p.out_channels {
            return Err(Error::shape(layer, "plan removes every filter of the layer"));
        }
    }

    let nodes = graph.nodes();
    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    let mut remap = ChannelRemap::default();
    let mut new_nodes = Vec::with_capacity(nodes.len());
    let input_channels = graph.input_shape().channels();

    for node in nodes {
        let keep_of = |producer: &str, keep: &[Vec<usize>]| -> Vec<usize> {
            match graph.position(producer) {
                Some(p) => keep[p].clone(),
                None => all(input_channels),
            }
        };
        let in_keep = keep_of(&node.inputs[0], &keep);
        let in_shape = graph.producer_shape(&node.inputs[0]);
        let mut new_node = node.clone();
        let out_keep = match &node.kind {
            LayerKind::Conv(p) => {
                let removed: BTreeSet<usize> = plan.removed(&node.id).iter().copied().collect();
                let own: Vec<usize> = (0..p.out_channels).filter(|i| !removed.contains(i)).collect();
                let depthwise = node.has(Annotation::Depthwise);
                if depthwise && own != in_keep {
                    return Err(Error::shape(
                        &node.id,
                        "depthwise filters removed do not match the input channels removed",
                    ));
                }
                let mut q = *p;
                q.out_channels = own.len();
                q.in_channels = in_keep.len();
                q.groups = if depthwise { in_keep.len() } else { 1 };
                new_node.kind = LayerKind::Conv(q);
                remap.layers.insert(
                    node.id.clone(),
                    LayerRemap {
                        kind: RemapKind::Conv { depthwise },
                        out_keep: own.clone(),
                        in_keep: if depthwise { vec![0] } else { in_keep.clone() },
                    },
                );
                own
            }
            LayerKind::BatchNorm(p) => {
                let mut q = *p;
                q.channels = in_keep.len();
                new_node.kind = LayerKind::BatchNorm(q);
                remap.layers.insert(
                    node.id.clone(),
                    LayerRemap {
                        kind: RemapKind::BatchNorm,
                        out_keep: in_keep.clone(),
                        in_keep: in_keep.clone(),
                    },
                );
                in_keep
            }
            LayerKind::Linear(p) => {
                let area = in_shape.area();
                let cols: Vec<usize> = in_keep
                    .iter()
                    .flat_map(|&c| c * area..(c + 1) * area)
                    .collect();
                let mut q = *p;
                q.in_features = cols.len();
                new_node.kind = LayerKind::Linear(q);
                remap.layers.insert(
                    node.id.clone(),
                    LayerRemap {
                        kind: RemapKind::Linear,
                        out_keep: all(p.out_features),
                        in_keep: cols,
                    },
                );
                all(p.out_features)
            }
            LayerKind::Add => {
                let other = keep_of(&node.inputs[1], &keep);
                if other != in_keep {
                    return Err(Error::shape(
                        &node.id,
                        format!(
                            "Add inputs '{}' and '{}' keep different channels after pruning",
                            node.inputs[0], node.inputs[1]
                        ),
                    ));
                }
                in_keep
            }
            LayerKind::Concat => {
                let mut offset = 0;
                let mut out = Vec::new();
                for inp in &node.inputs {
                    out.extend(keep_of(inp, &keep).into_iter().map(|c| c + offset));
                    offset += graph.producer_shape(inp).channels();
                }
                out
            }
            LayerKind::Flatten => {
                let area = in_shape.area();
                in_keep
                    .iter()
                    .flat_map(|&c| c * area..(c + 1) * area)
                    .collect()
            }
            LayerKind::ReLU | LayerKind::MaxPool(_) | LayerKind::GlobalAvgPool => in_keep,
        };
        remap.outputs.insert(node.id.clone(), out_keep.clone());
        keep.push(out_keep);
        new_nodes.push(new_node);
    }

    let shrunk = graph.with_nodes(new_nodes)?;
    Ok((shrunk, remap))
}

fn select_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let row_len = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("consistent slice")
}

/// Keeps `rows` along dim 0 and `cols` along dim 1; trailing dims untouched.
fn select_rows_cols<T: Scalar>(t: &Tensor<T>, rows: &[usize], cols: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let inner: usize = s[2..].iter().product();
    let row_len = s[1] * inner;
    let mut data = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &r in rows {
        let row = &t.data()[r * row_len..(r + 1) * row_len];
        for &c in cols {
            data.extend_from_slice(&row[c * inner..(c + 1) * inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[0] = rows.len();
    shape[1] = cols.len();
    Tensor::new(shape, data).expect("consistent slice")
}

/// Copies the surviving filters, input channels, BatchNorm slices and linear
/// columns into a store matching `shrunk`.
pub fn transfer_weights<T: Scalar>(
    old: &WeightStore<T>,
    remap: &ChannelRemap,
    shrunk: &ModelGraph,
) -> Result<WeightStore<T>> {
    let mut out = WeightStore::new();
    for (layer, r) in &remap.layers {
        match r.kind {
            RemapKind::Conv { depthwise } => {
                let w = old.param(layer, "weight")?;
                if w.shape().len() != 4 {
                    return Err(Error::ShapeMismatch {
                        name: tensor_name(layer, "weight"),
                        expected: vec![0, 0, 0, 0],
                        found: w.shape().to_vec(),
                    });
                }
                let sliced = if depthwise {
                    select_rows(w, &r.out_keep)
                } else {
                    select_rows_cols(w, &r.out_keep, &r.in_keep)
                };
                out.insert(tensor_name(layer, "weight"), sliced);
                let bias = tensor_name(layer, "bias");
                if old.contains(&bias) {
                    out.insert(bias.clone(), select_rows(old.get(&bias)?, &r.out_keep));
                }
            }
            RemapKind::BatchNorm => {
                for f in ["gamma", "beta", "running_mean", "running_var"] {
                    out.insert(tensor_name(layer, f), select_rows(old.param(layer, f)?, &r.out_keep));
                }
            }
            RemapKind::Linear => {
                let w = old.param(layer, "weight")?;
                out.insert(
                    tensor_name(layer, "weight"),
                    select_rows_cols(w, &r.out_keep, &r.in_keep),
                );
                out.insert(tensor_name(layer, "bias"), old.param(layer, "bias")?.clone());
            }
        }
    }
    out.check_against(shrunk)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deps::{compute_dependencies, ResidualPolicy};
    use crate::fixtures::{self, FixtureSize};
    use crate::ir::{infer_shapes, serialize_model};
    use crate::prune::RankingScope;
    use crate::runtime::init_weights;

    fn fixture(name: &str) -> ModelGraph {
        fixtures::by_name(name, FixtureSize::default()).unwrap()
    }

    fn plan(g: &ModelGraph, removals: &[(&str, Vec<usize>)]) -> PrunePlan {
        PrunePlan::from_removals(
            g,
            removals.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            RankingScope::Global,
        )
        .unwrap()
    }

    #[test]
    fn empty_plan_is_identity() {
        for name in fixtures::FIXTURE_NAMES {
            let g = fixture(name);
            let (s, remap) = shrink_graph(&g, &plan(&g, &[])).unwrap();
            assert_eq!(serialize_model(&s), serialize_model(&g));
            let w = init_weights(&g, 9);
            assert_eq!(transfer_weights(&w, &remap, &s).unwrap(), w);
        }
    }

    #[test]
    fn fire_expand_removal_shifts_concat_offsets() {
        let g = fixture("tiny-squeezenet");
        let (s, remap) = shrink_graph(&g, &plan(&g, &[("fire1_expand1x1", vec![3, 7])])).unwrap();
        // Brute force: enumerate the concat channels that survive.
        let survivors: Vec<usize> = (0..32).filter(|&c| c != 3 && c != 7).collect();
        for old in 16..32 {
            let new = remap.new_input_index("fire2_squeeze", old).unwrap();
            assert_eq!(new, survivors.iter().position(|&c| c == old).unwrap());
            assert_eq!(new, old - 2);
        }
        assert_eq!(remap.new_input_index("fire2_squeeze", 3), None);
        assert_eq!(s.node("fire2_squeeze").unwrap().kind.as_conv().unwrap().in_channels, 30);
    }

    #[test]
    fn resnet_group_removal_keeps_adds_consistent() {
        let g = fixture("tiny-resnet");
        let idx = vec![1, 4, 9, 13];
        let p = plan(
            &g,
            &[
                ("conv_down_1", idx.clone()),
                ("conv_final_1a", idx.clone()),
                ("conv_final_1b", idx.clone()),
            ],
        );
        let d = compute_dependencies(&g, ResidualPolicy::TieGroup).unwrap();
        crate::deps::validate_plan_against_deps(&d, &p).unwrap();
        let (s, _) = shrink_graph(&g, &p).unwrap();
        let shapes = infer_shapes(&s).unwrap();
        for add in ["add_1a", "add_1b"] {
            let node = s.node(add).unwrap();
            assert_eq!(shapes[&node.inputs[0]], shapes[&node.inputs[1]]);
            assert_eq!(shapes[add].channels(), 28);
        }
    }

    #[test]
    fn uncoupled_residual_removal_fails() {
        let g = fixture("tiny-resnet");
        let err = shrink_graph(&g, &plan(&g, &[("conv_final_0a", vec![2])])).unwrap_err();
        match err {
            Error::Shape { node, .. } => assert_eq!(node, "add_0a"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn uncoupled_depthwise_removal_fails() {
        let g = fixture("tiny-mobilenetv2");
        let err = shrink_graph(&g, &plan(&g, &[("expand_1x1_2", vec![5])])).unwrap_err();
        match err {
            Error::Shape { node, .. } => assert_eq!(node, "dw_3x3_2"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn depthwise_slice_follows_expand() {
        let g = fixture("tiny-mobilenetv2");
        let p = plan(&g, &[("expand_1x1_1", vec![5]), ("dw_3x3_1", vec![5])]);
        let (s, remap) = shrink_graph(&g, &p).unwrap();
        let w = init_weights(&g, 4);
        let nw = transfer_weights(&w, &remap, &s).unwrap();
        let old_dw = w.param("dw_3x3_1", "weight").unwrap();
        let new_dw = nw.param("dw_3x3_1", "weight").unwrap();
        assert_eq!(new_dw.shape(), &[47, 1, 3, 3]);
        // filter 6 of the old depthwise conv became filter 5
        assert_eq!(&new_dw.data()[5 * 9..6 * 9], &old_dw.data()[6 * 9..7 * 9]);
        let old_gamma = w.param("bn_dw_1", "running_var").unwrap();
        let new_gamma = nw.param("bn_dw_1", "running_var").unwrap();
        assert_eq!(new_gamma.numel(), 47);
        assert_eq!(new_gamma.data()[5], old_gamma.data()[6]);
    }

    #[test]
    fn flatten_columns_are_sliced_channel_major() {
        let g = fixture("tiny-alexnet");
        let p = plan(&g, &[("conv4", vec![0, 2])]);
        let (s, remap) = shrink_graph(&g, &p).unwrap();
        let w = init_weights(&g, 8);
        let nw = transfer_weights(&w, &remap, &s).unwrap();
        let old = w.param("fc1", "weight").unwrap();
        let new = nw.param("fc1", "weight").unwrap();
        assert_eq!(new.shape(), &[64, 62 * 16]);
        // channels 0 and 2 are gone: new column 0 is old channel 1's first
        // column, new column 16 is old channel 3's
        assert_eq!(new.data()[0], old.data()[16]);
        assert_eq!(new.data()[16], old.data()[48]);
        assert_eq!(new.data()[62 * 16], old.data()[64 * 16 + 16]);
    }

    #[test]
    fn transfer_rejects_wrong_store() {
        let g = fixture("toy2");
        let (s, remap) = shrink_graph(&g, &plan(&g, &[("conv1", vec![0])])).unwrap();
        let mut w = init_weights(&g, 1);
        w.insert("conv2.weight", Tensor::zeros(vec![6, 4, 3, 1]));
        assert!(transfer_weights(&w, &remap, &s).is_err());
    }

    #[test]
    fn plan_entry_errors() {
        let g = fixture("toy2");
        for bad in [
            plan_raw(&[("relu1", vec![0])]),
            plan_raw(&[("conv1", vec![4])]),
            plan_raw(&[("conv1", vec![0, 1, 2, 3])]),
            plan_raw(&[("conv1", vec![2, 1])]),
        ] {
            assert!(matches!(shrink_graph(&g, &bad), Err(Error::Shape { .. })));
        }
    }

    fn plan_raw(removals: &[(&str, Vec<usize>)]) -> PrunePlan {
        PrunePlan {
            removals: removals.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            target_level: 0.0,
            achieved_level: 0.0,
            ranking_scope: RankingScope::Global,
            params_before: 0,
            params_after: 0,
            steps: vec![],
        }
    }
}
