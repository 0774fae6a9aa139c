mod common;

use common::*;
use prunekit::data::{synthetic, SyntheticSpec};
use prunekit::fixtures::{FixtureSize, FIXTURE_NAMES};
use prunekit::runtime::{
    evaluate, forward, forward_train, init_weights, softmax_cross_entropy, train, AugmentConfig,
    LrSchedule, Mode, TrainConfig,
};
use prunekit::ir::{BatchNormParams, LayerKind, LayerNode, LinearParams, TensorShape, GRAPH_INPUT};
use prunekit::{ModelGraph, Tensor};

#[test]
fn forward_matches_reference_loops() {
    for name in FIXTURE_NAMES {
        let g = fixture(name, small());
        let ws = rich_weights(&g, 3);
        let x = batch_for(&g, 3, 11);
        let ours = forward(&g, &ws, &x, Mode::Eval).unwrap();
        let reference: Vec<f64> = reference_forward(&g, &ws, &x).concat();
        let d = max_abs_diff(ours.data(), &reference);
        assert!(d < 1e-10, "{name}: f64 forward differs by {d}");

        let ours32 = forward(&g, &ws.cast::<f32>(), &x.cast::<f32>(), Mode::Eval).unwrap();
        let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let d32 = max_abs_diff(&ours32.cast::<f64>().into_data(), &reference);
        assert!(d32 < 1e-4 * scale, "{name}: f32 forward differs by {d32}");
    }
}

#[test]
fn gradients_match_central_differences() {
    for name in FIXTURE_NAMES {
        let (checked, worst) = gradient_check(&fixture(name, small()), 8);
        assert!(checked > 0);
        assert!(worst <= 1e-4, "{name}: worst relative error {worst:.3e}");
    }
}

fn bn_probe() -> ModelGraph {
    let nodes = vec![
        LayerNode::new("bn", LayerKind::BatchNorm(BatchNormParams::new(3)), &[GRAPH_INPUT]),
        LayerNode::new("gap", LayerKind::GlobalAvgPool, &["bn"]),
        LayerNode::new(
            "fc",
            LayerKind::Linear(LinearParams {
                in_features: 3,
                out_features: 2,
            }),
            &["gap"],
        ),
    ];
    ModelGraph::new("bn-probe", TensorShape::feature_map(3, 2, 2), 2, nodes).unwrap()
}

#[test]
fn running_statistics_follow_momentum_rule() {
    let g = bn_probe();
    let mut ws = rich_weights(&g, 4);
    let before = ws.clone();
    let x = batch_for(&g, 3, 2);
    // train-mode forward alone leaves statistics untouched
    forward(&g, &ws, &x, Mode::Train).unwrap();
    forward_train(&g, &mut ws, &x).unwrap();
    let (rm0, rv0) = (before.param("bn", "running_mean").unwrap(), before.param("bn", "running_var").unwrap());
    let (rm, rv) = (ws.param("bn", "running_mean").unwrap(), ws.param("bn", "running_var").unwrap());
    for ch in 0..3 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| x.data()[(n * 3 + ch) * 4..(n * 3 + ch + 1) * 4].to_vec())
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let unbiased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!((rm.data()[ch] - (0.9 * rm0.data()[ch] + 0.1 * mean)).abs() < 1e-12);
        assert!((rv.data()[ch] - (0.9 * rv0.data()[ch] + 0.1 * unbiased)).abs() < 1e-12);
    }
    // learnable BN parameters are not touched by the statistics update
    assert_eq!(ws.param("bn", "gamma").unwrap(), before.param("bn", "gamma").unwrap());
}

#[test]
fn loss_of_uniform_logits_is_log_k() {
    let logits = Tensor::new(vec![2, 5], vec![0.3f64; 10]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&logits, &[1, 4]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    // d/dz = (softmax - onehot) / N
    assert!((grad.data()[0] - 0.1).abs() < 1e-12);
    assert!((grad.data()[1] - (0.2 - 1.0) / 2.0).abs() < 1e-12);
    let sum: f64 = grad.data().iter().sum();
    assert!(sum.abs() < 1e-12);
}

#[test]
fn training_learns_separable_synthetic_classes() {
    let spec = SyntheticSpec {
        noise: 0.1,
        ..SyntheticSpec::small(4, 8, 7)
    };
    let (tr, te) = synthetic(&spec).unwrap();
    let g = fixture("tiny-resnet", FixtureSize {
        resolution: 8,
        width: 8,
        num_classes: 4,
    });
    let ws = init_weights(&g, 0);
    let before = evaluate(&g, &ws, &te).unwrap().accuracy;
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 6,
        lr_schedule: LrSchedule::constant(0.05),
        augment: AugmentConfig::off(),
        ..TrainConfig::default()
    };
    let out = train(&g, &ws, &tr, &cfg).unwrap();
    let after = evaluate(&g, &out.weights, &te).unwrap();
    assert_eq!(out.history.len(), 6);
    assert!(after.accuracy >= 0.9, "accuracy {} (before {before})", after.accuracy);
    assert_eq!(after.total, te.len());
    let best = out.best_val_accuracy.unwrap();
    assert!(out.history.iter().all(|e| e.val_accuracy <= best));
}

#[test]
fn evaluation_counts_agree_with_reference_argmax() {
    let (_, te) = synthetic(&SyntheticSpec::small(5, 8, 3)).unwrap();
    let g = fixture("tiny-alexnet", small());
    let ws = rich_weights(&g, 9);
    let ev = evaluate(&g, &ws, &te).unwrap();
    let idx: Vec<usize> = (0..te.len()).collect();
    let x = te.batch::<f64>(&idx);
    let mut correct = 0;
    for (i, row) in reference_forward(&g, &ws, &x).iter().enumerate() {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == te.label(i) {
            correct += 1;
        }
    }
    assert_eq!(ev.correct, correct);
}
