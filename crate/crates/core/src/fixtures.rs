//! Bundled architectures, one per structural module family: sequential
//! (tiny-alexnet), residual groups (tiny-resnet, 3 groups x 2 blocks), MBConv
//! (tiny-mobilenetv2, 4 blocks) and Fire modules (tiny-squeezenet, 3 fires).
//!
//! Builders take a [`FixtureSize`] so the same topologies can be scaled down
//! for fast training runs; [`FixtureSize::default`] matches the bundled JSON
//! documents under `fixtures/`.

use crate::error::{Error, Result};
use crate::ir::{
    Annotation, BatchNormParams, ConvParams, LayerKind, LayerNode, LinearParams, ModelGraph,
    PoolParams, TensorShape, GRAPH_INPUT,
};

pub const FIXTURE_NAMES: [&str; 4] = [
    "tiny-alexnet",
    "tiny-resnet",
    "tiny-mobilenetv2",
    "tiny-squeezenet",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSize {
    /// Square input resolution; must be divisible by 8.
    pub resolution: usize,
    /// Base channel width; must be even and at least 4.
    pub width: usize,
    pub num_classes: usize,
}

impl Default for FixtureSize {
    fn default() -> Self {
        FixtureSize {
            resolution: 32,
            width: 16,
            num_classes: 10,
        }
    }
}

pub fn by_name(name: &str, size: FixtureSize) -> Result<ModelGraph> {
    if size.resolution == 0 || size.resolution % 8 != 0 || size.width < 4 || size.width % 2 != 0 {
        return Err(Error::Config(format!("unsupported fixture size {size:?}")));
    }
    match name {
        "tiny-alexnet" => tiny_alexnet(size),
        "tiny-resnet" => tiny_resnet(size),
        "tiny-mobilenetv2" => tiny_mobilenetv2(size),
        "tiny-squeezenet" => tiny_squeezenet(size),
        "toy2" => toy2(),
        other => Err(Error::Config(format!("unknown fixture '{other}'"))),
    }
}

fn conv(id: &str, input: &str, p: ConvParams) -> LayerNode {
    LayerNode::new(id, LayerKind::Conv(p), &[input])
}

fn bn(id: &str, input: &str, channels: usize) -> LayerNode {
    LayerNode::new(id, LayerKind::BatchNorm(BatchNormParams::new(channels)), &[input])
}

fn relu(id: &str, input: &str) -> LayerNode {
    LayerNode::new(id, LayerKind::ReLU, &[input])
}

fn maxpool(id: &str, input: &str) -> LayerNode {
    LayerNode::new(id, LayerKind::MaxPool(PoolParams { kernel: 2, stride: 2 }), &[input])
}

fn linear(id: &str, input: &str, in_features: usize, out_features: usize) -> LayerNode {
    LayerNode::new(
        id,
        LayerKind::Linear(LinearParams {
            in_features,
            out_features,
        }),
        &[input],
    )
}

fn classifier_head(nodes: &mut Vec<LayerNode>, input: &str, channels: usize, classes: usize) {
    nodes.push(LayerNode::new("gap", LayerKind::GlobalAvgPool, &[input]));
    nodes.push(LayerNode::new("flatten", LayerKind::Flatten, &["gap"]));
    nodes.push(linear("fc", "flatten", channels, classes));
}

fn input_shape(size: FixtureSize) -> TensorShape {
    TensorShape::feature_map(3, size.resolution, size.resolution)
}

/// Sequential conv stack with biased convs and a two-layer classifier over a
/// flattened feature map.
pub fn tiny_alexnet(size: FixtureSize) -> Result<ModelGraph> {
    let b = size.width;
    let mut nodes = vec![
        conv("conv1", GRAPH_INPUT, ConvParams::new(3, b, 3).with_bias(true)),
        relu("relu1", "conv1"),
        maxpool("pool1", "relu1"),
        conv("conv2", "pool1", ConvParams::new(b, 2 * b, 3).with_bias(true)),
        relu("relu2", "conv2"),
        maxpool("pool2", "relu2"),
        conv("conv3", "pool2", ConvParams::new(2 * b, 4 * b, 3).with_bias(true)),
        relu("relu3", "conv3"),
        conv("conv4", "relu3", ConvParams::new(4 * b, 4 * b, 3).with_bias(true)),
        relu("relu4", "conv4"),
        maxpool("pool3", "relu4"),
        LayerNode::new("flatten", LayerKind::Flatten, &["pool3"]),
    ];
    let spatial = size.resolution / 8;
    let features = 4 * b * spatial * spatial;
    nodes.push(linear("fc1", "flatten", features, 4 * b));
    nodes.push(relu("relu_fc1", "fc1"));
    nodes.push(linear("fc2", "relu_fc1", 4 * b, size.num_classes));
    ModelGraph::new("tiny-alexnet", input_shape(size), size.num_classes, nodes)
}

/// Stem plus three residual groups of two blocks each. Every group opens with
/// a 1x1 `conv_down_<g>` on the skip path; `conv_final_<g><a|b>` close the
/// blocks.
pub fn tiny_resnet(size: FixtureSize) -> Result<ModelGraph> {
    let b = size.width;
    let mut nodes = vec![
        conv("conv_stem", GRAPH_INPUT, ConvParams::new(3, b, 3)),
        bn("bn_stem", "conv_stem", b),
        relu("relu_stem", "bn_stem"),
    ];
    let mut prev = "relu_stem".to_string();
    let mut in_ch = b;
    for (g, (ch, stride)) in [(b, 1), (2 * b, 2), (4 * b, 2)].into_iter().enumerate() {
        let gid = g as u32;
        let down = format!("conv_down_{g}");
        nodes.push(
            conv(&down, &prev, ConvParams::new(in_ch, ch, 1).with_stride(stride))
                .tagged(&[Annotation::ResidualDown, Annotation::ResidualGroup(gid)]),
        );
        nodes.push(bn(&format!("bn_down_{g}"), &down, ch));
        for blk in ['a', 'b'] {
            let tag = format!("{g}{blk}");
            let (block_in, block_stride, block_in_ch) = if blk == 'a' {
                (prev.clone(), stride, in_ch)
            } else {
                (format!("relu_out_{g}a"), 1, ch)
            };
            let skip = if blk == 'a' {
                format!("bn_down_{g}")
            } else {
                format!("relu_out_{g}a")
            };
            nodes.push(conv(
                &format!("conv_{tag}"),
                &block_in,
                ConvParams::new(block_in_ch, ch, 3).with_stride(block_stride),
            ));
            nodes.push(bn(&format!("bn_{tag}"), &format!("conv_{tag}"), ch));
            nodes.push(relu(&format!("relu_{tag}"), &format!("bn_{tag}")));
            nodes.push(
                conv(
                    &format!("conv_final_{tag}"),
                    &format!("relu_{tag}"),
                    ConvParams::new(ch, ch, 3),
                )
                .tagged(&[Annotation::ResidualFinal, Annotation::ResidualGroup(gid)]),
            );
            nodes.push(bn(&format!("bn_final_{tag}"), &format!("conv_final_{tag}"), ch));
            nodes.push(LayerNode::new(
                format!("add_{tag}"),
                LayerKind::Add,
                &[&format!("bn_final_{tag}"), &skip],
            ));
            nodes.push(relu(&format!("relu_out_{tag}"), &format!("add_{tag}")));
        }
        prev = format!("relu_out_{g}b");
        in_ch = ch;
    }
    classifier_head(&mut nodes, &prev, in_ch, size.num_classes);
    ModelGraph::new("tiny-resnet", input_shape(size), size.num_classes, nodes)
}

/// Stem, four inverted-residual blocks (expand 1x1, depthwise 3x3, project
/// 1x1) and a 1x1 head conv. Blocks 2 and 4 keep their width at stride 1 and
/// carry an identity skip; the project conv of the preceding block plays the
/// `residual_down` role for that skip.
pub fn tiny_mobilenetv2(size: FixtureSize) -> Result<ModelGraph> {
    let b = size.width;
    let expand = 3;
    let mut nodes = vec![
        conv("conv_stem", GRAPH_INPUT, ConvParams::new(3, b, 3)),
        bn("bn_stem", "conv_stem", b),
        relu("relu_stem", "bn_stem"),
    ];
    let wide = b + b / 2;
    // (out channels, stride, identity skip, residual group)
    let blocks = [
        (wide, 2, false, 0u32),
        (wide, 1, true, 0),
        (2 * b, 2, false, 1),
        (2 * b, 1, true, 1),
    ];
    let mut prev = "relu_stem".to_string();
    let mut in_ch = b;
    for (i, &(out_ch, stride, skip, gid)) in blocks.iter().enumerate() {
        let i = i + 1;
        let hidden = in_ch * expand;
        let e = format!("expand_1x1_{i}");
        let dw = format!("dw_3x3_{i}");
        let pr = format!("project_{i}");
        nodes.push(conv(&e, &prev, ConvParams::new(in_ch, hidden, 1)));
        nodes.push(bn(&format!("bn_expand_{i}"), &e, hidden));
        nodes.push(relu(&format!("relu_expand_{i}"), &format!("bn_expand_{i}")));
        nodes.push(
            conv(&dw, &format!("relu_expand_{i}"), ConvParams::depthwise(hidden, 3, stride))
                .tagged(&[Annotation::Depthwise]),
        );
        nodes.push(bn(&format!("bn_dw_{i}"), &dw, hidden));
        nodes.push(relu(&format!("relu_dw_{i}"), &format!("bn_dw_{i}")));
        let role = if skip {
            Annotation::ResidualFinal
        } else {
            Annotation::ResidualDown
        };
        nodes.push(
            conv(&pr, &format!("relu_dw_{i}"), ConvParams::new(hidden, out_ch, 1))
                .tagged(&[role, Annotation::ResidualGroup(gid)]),
        );
        nodes.push(bn(&format!("bn_project_{i}"), &pr, out_ch));
        prev = if skip {
            let add = format!("add_{i}");
            nodes.push(LayerNode::new(
                add.clone(),
                LayerKind::Add,
                &[&format!("bn_project_{i}"), &prev],
            ));
            add
        } else {
            format!("bn_project_{i}")
        };
        in_ch = out_ch;
    }
    let head = 4 * b;
    nodes.push(conv("conv_head", &prev, ConvParams::new(in_ch, head, 1)));
    nodes.push(bn("bn_head", "conv_head", head));
    nodes.push(relu("relu_head", "bn_head"));
    classifier_head(&mut nodes, "relu_head", head, size.num_classes);
    ModelGraph::new("tiny-mobilenetv2", input_shape(size), size.num_classes, nodes)
}

fn fire(
    nodes: &mut Vec<LayerNode>,
    name: &str,
    input: &str,
    in_ch: usize,
    squeeze: usize,
    expand: usize,
) -> String {
    let sq = format!("{name}_squeeze");
    let e1 = format!("{name}_expand1x1");
    let e3 = format!("{name}_expand3x3");
    nodes.push(
        conv(&sq, input, ConvParams::new(in_ch, squeeze, 1).with_bias(true))
            .tagged(&[Annotation::FireSqueeze]),
    );
    nodes.push(relu(&format!("{sq}_relu"), &sq));
    nodes.push(
        conv(&e1, &format!("{sq}_relu"), ConvParams::new(squeeze, expand, 1).with_bias(true))
            .tagged(&[Annotation::FireExpand]),
    );
    nodes.push(relu(&format!("{e1}_relu"), &e1));
    nodes.push(
        conv(&e3, &format!("{sq}_relu"), ConvParams::new(squeeze, expand, 3).with_bias(true))
            .tagged(&[Annotation::FireExpand]),
    );
    nodes.push(relu(&format!("{e3}_relu"), &e3));
    let cat = format!("{name}_concat");
    nodes.push(LayerNode::new(
        cat.clone(),
        LayerKind::Concat,
        &[&format!("{e1}_relu"), &format!("{e3}_relu")],
    ));
    cat
}

/// Stem conv, three Fire modules (squeeze 1x1 feeding parallel 1x1 and 3x3
/// expands joined by a Concat) and a linear classifier.
pub fn tiny_squeezenet(size: FixtureSize) -> Result<ModelGraph> {
    let b = size.width;
    let mut nodes = vec![
        conv("conv1", GRAPH_INPUT, ConvParams::new(3, b, 3).with_bias(true)),
        relu("relu1", "conv1"),
        maxpool("pool1", "relu1"),
    ];
    let f1 = fire(&mut nodes, "fire1", "pool1", b, b / 2, b);
    let f2 = fire(&mut nodes, "fire2", &f1, 2 * b, b / 2, b);
    nodes.push(maxpool("pool2", &f2));
    let f3 = fire(&mut nodes, "fire3", "pool2", 2 * b, b, 2 * b);
    classifier_head(&mut nodes, &f3, 4 * b, size.num_classes);
    ModelGraph::new("tiny-squeezenet", input_shape(size), size.num_classes, nodes)
}

/// Two convs on a 3x6x6 input with a BatchNorm after the first conv and a
/// flattened linear head; small enough for exhaustive plan enumeration.
pub fn toy2() -> Result<ModelGraph> {
    let nodes = vec![
        conv("conv1", GRAPH_INPUT, ConvParams::new(3, 4, 3)),
        bn("bn1", "conv1", 4),
        relu("relu1", "bn1"),
        conv("conv2", "relu1", ConvParams::new(4, 6, 3).with_stride(2).with_bias(true)),
        relu("relu2", "conv2"),
        LayerNode::new("flatten", LayerKind::Flatten, &["relu2"]),
        linear("fc", "flatten", 6 * 9, 3),
    ];
    ModelGraph::new("toy2", TensorShape::feature_map(3, 6, 6), 3, nodes)
}

/// Canonical JSON of a bundled fixture at the default size.
pub fn bundled_document(name: &str) -> Option<&'static str> {
    Some(match name {
        "tiny-alexnet" => include_str!("../fixtures/tiny-alexnet.json"),
        "tiny-resnet" => include_str!("../fixtures/tiny-resnet.json"),
        "tiny-mobilenetv2" => include_str!("../fixtures/tiny-mobilenetv2.json"),
        "tiny-squeezenet" => include_str!("../fixtures/tiny-squeezenet.json"),
        "toy2" => include_str!("../fixtures/toy2.json"),
        _ => return None,
    })
}
