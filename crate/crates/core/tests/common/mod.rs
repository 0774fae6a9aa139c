//! Shared oracles for the integration tests. Everything here is written
//! independently of the library's kernels: plain nested loops, f64 only.

#![allow(dead_code)]

use std::collections::BTreeMap;

use prunekit::deps::DependencyMap;
use prunekit::fixtures::{self, FixtureSize};
use prunekit::ir::{LayerKind, ModelGraph, GRAPH_INPUT};
use prunekit::prune::{build_plan, FilterScore, PrunePlan, RankingScope};
use prunekit::runtime::{forward, init_weights, loss_and_gradients, softmax_cross_entropy, Mode};
use prunekit::tensor::is_learnable;
use prunekit::{Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small() -> FixtureSize {
    FixtureSize {
        resolution: 8,
        width: 4,
        num_classes: 5,
    }
}

pub fn fixture(name: &str, size: FixtureSize) -> ModelGraph {
    fixtures::by_name(name, size).unwrap()
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Init weights with non-trivial biases and BatchNorm parameters/statistics.
pub fn rich_weights(graph: &ModelGraph, seed: u64) -> WeightStore<f64> {
    let mut ws = init_weights(graph, seed).cast::<f64>();
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in ws.iter_mut() {
        let f = name.rsplit('.').next().unwrap();
        for v in t.data_mut() {
            match f {
                "bias" | "beta" | "running_mean" => *v = r.gen_range(-0.5..0.5),
                "gamma" => *v = r.gen_range(0.5..1.5),
                "running_var" => *v = r.gen_range(0.5..2.0),
                _ => {}
            }
        }
    }
    ws
}

fn get<'a>(ws: &'a WeightStore<f64>, layer: &str, field: &str) -> &'a [f64] {
    ws.param(layer, field).unwrap().data()
}

/// Eval-mode forward, one sample at a time, straight from the definitions.
pub fn reference_forward(graph: &ModelGraph, ws: &WeightStore<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    (0..n)
        .map(|i| reference_sample(graph, ws, &x.data()[i * per..(i + 1) * per]))
        .collect()
}

type Map = (Vec<f64>, usize, usize, usize); // data, c, h, w

fn reference_sample(graph: &ModelGraph, ws: &WeightStore<f64>, x: &[f64]) -> Vec<f64> {
    let s = graph.input_shape();
    let mut vals: BTreeMap<String, Map> = BTreeMap::new();
    vals.insert(GRAPH_INPUT.to_string(), (x.to_vec(), s.channels(), s.height(), s.width()));
    for node in graph.nodes() {
        let (xin, c, h, w) = vals[&node.inputs[0]].clone();
        let at = |ch: usize, y: usize, xx: usize| xin[(ch * h + y) * w + xx];
        let out: Map = match &node.kind {
            LayerKind::Conv(p) => {
                let wt = get(ws, &node.id, "weight");
                let bias = p.has_bias.then(|| get(ws, &node.id, "bias"));
                let ho = (h + 2 * p.padding - p.kernel) / p.stride + 1;
                let wo = (w + 2 * p.padding - p.kernel) / p.stride + 1;
                let cin_per = c / p.groups;
                let out_per = p.out_channels / p.groups;
                let mut o = vec![0.0; p.out_channels * ho * wo];
                for oc in 0..p.out_channels {
                    let g = oc / out_per;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bias.map_or(0.0, |b| b[oc]);
                            for ic in 0..cin_per {
                                for ky in 0..p.kernel {
                                    for kx in 0..p.kernel {
                                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                        let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let widx = ((oc * cin_per + ic) * p.kernel + ky) * p.kernel + kx;
                                        acc += wt[widx] * at(g * cin_per + ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                            o[(oc * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
                (o, p.out_channels, ho, wo)
            }
            LayerKind::BatchNorm(p) => {
                let (g, b) = (get(ws, &node.id, "gamma"), get(ws, &node.id, "beta"));
                let (m, v) = (get(ws, &node.id, "running_mean"), get(ws, &node.id, "running_var"));
                let mut o = xin.clone();
                for ch in 0..c {
                    for i in 0..h * w {
                        o[ch * h * w + i] = g[ch] * (xin[ch * h * w + i] - m[ch]) / (v[ch] + p.epsilon).sqrt() + b[ch];
                    }
                }
                (o, c, h, w)
            }
            LayerKind::ReLU => (xin.iter().map(|v| v.max(0.0)).collect(), c, h, w),
            LayerKind::MaxPool(p) => {
                let ho = (h - p.kernel) / p.stride + 1;
                let wo = (w - p.kernel) / p.stride + 1;
                let mut o = vec![f64::NEG_INFINITY; c * ho * wo];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ky in 0..p.kernel {
                                for kx in 0..p.kernel {
                                    let v = at(ch, oy * p.stride + ky, ox * p.stride + kx);
                                    let slot = &mut o[(ch * ho + oy) * wo + ox];
                                    *slot = slot.max(v);
                                }
                            }
                        }
                    }
                }
                (o, c, ho, wo)
            }
            LayerKind::GlobalAvgPool => (
                (0..c)
                    .map(|ch| xin[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                    .collect(),
                c,
                1,
                1,
            ),
            LayerKind::Flatten => (xin.clone(), c * h * w, 1, 1),
            LayerKind::Linear(p) => {
                let (wt, b) = (get(ws, &node.id, "weight"), get(ws, &node.id, "bias"));
                let o = (0..p.out_features)
                    .map(|j| b[j] + (0..p.in_features).map(|i| wt[j * p.in_features + i] * xin[i]).sum::<f64>())
                    .collect();
                (o, p.out_features, 1, 1)
            }
            LayerKind::Add => {
                let other = &vals[&node.inputs[1]].0;
                (xin.iter().zip(other).map(|(a, b)| a + b).collect(), c, h, w)
            }
            LayerKind::Concat => {
                let mut o = Vec::new();
                let mut total = 0;
                for i in &node.inputs {
                    let v = &vals[i];
                    o.extend_from_slice(&v.0);
                    total += v.1;
                }
                (o, total, h, w)
            }
        };
        vals.insert(node.id.clone(), out);
    }
    vals[&graph.nodes().last().unwrap().id].0.clone()
}

/// Scores that make `build_plan` remove a uniformly random sequence of
/// prunable filters (coupled sets move together).
pub fn random_scores(graph: &ModelGraph, deps: &DependencyMap, rng: &mut ChaCha8Rng) -> Vec<FilterScore> {
    let mut out = Vec::new();
    let mut grouped = std::collections::BTreeSet::new();
    for (gi, set) in deps.sets.iter().enumerate() {
        let n = graph.node(set.key()).unwrap().kind.as_conv().unwrap().out_channels;
        grouped.extend(set.members.iter().cloned());
        for i in 0..n {
            out.push(FilterScore {
                layer_id: set.key().to_string(),
                filter_index: i,
                score: rng.gen(),
                group_key: Some(gi),
            });
        }
    }
    for node in graph.nodes() {
        let Some(p) = node.kind.as_conv() else { continue };
        if grouped.contains(&node.id) || !deps.is_prunable(&node.id) {
            continue;
        }
        for i in 0..p.out_channels {
            out.push(FilterScore {
                layer_id: node.id.clone(),
                filter_index: i,
                score: rng.gen(),
                group_key: None,
            });
        }
    }
    out
}

/// A random dependency-respecting plan at `level` (falls back to lower
/// levels if infeasible).
pub fn random_plan(graph: &ModelGraph, deps: &DependencyMap, level: f64, rng: &mut ChaCha8Rng) -> PrunePlan {
    let scores = random_scores(graph, deps, rng);
    let mut lv = level;
    loop {
        match build_plan(graph, deps, &scores, lv, RankingScope::Global) {
            Ok(p) => return p,
            Err(prunekit::Error::InfeasibleTarget { max_achievable, .. }) => lv = (max_achievable - 1.0).max(0.0),
            Err(e) => panic!("{e}"),
        }
    }
}

/// Zeroes the removed filters (weights and bias) and the BatchNorm channels
/// directly fed by them, leaving shapes unchanged.
pub fn mask_weights(graph: &ModelGraph, ws: &WeightStore<f64>, plan: &PrunePlan) -> WeightStore<f64> {
    let mut out = ws.clone();
    for (layer, idx) in &plan.removals {
        let p = *graph.node(layer).unwrap().kind.as_conv().unwrap();
        let per = p.fan_in_channels() * p.kernel * p.kernel;
        let w = out.get_mut(&format!("{layer}.weight")).unwrap();
        for &i in idx {
            w.data_mut()[i * per..(i + 1) * per].iter_mut().for_each(|v| *v = 0.0);
        }
        if p.has_bias {
            let b = out.get_mut(&format!("{layer}.bias")).unwrap();
            for &i in idx {
                b.data_mut()[i] = 0.0;
            }
        }
        for node in graph.nodes() {
            if matches!(node.kind, LayerKind::BatchNorm(_)) && node.inputs[0] == *layer {
                for f in ["gamma", "beta"] {
                    let t = out.get_mut(&format!("{}.{f}", node.id)).unwrap();
                    for &i in idx {
                        t.data_mut()[i] = 0.0;
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn batch_for(graph: &ModelGraph, n: usize, seed: u64) -> Tensor<f64> {
    let mut dims = vec![n];
    dims.extend_from_slice(graph.input_shape().dims());
    random_tensor(dims, &mut rng(seed))
}

fn loss_at(g: &ModelGraph, ws: &WeightStore<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let logits = forward(g, ws, x, Mode::Train).unwrap();
    softmax_cross_entropy(&logits, labels).unwrap().0
}

/// Central differences (step 1e-5, f64, batch-statistics BatchNorm) on
/// `per_tensor` random entries of every learnable tensor. Returns the number
/// of entries checked and the worst relative error.
pub fn gradient_check(g: &ModelGraph, per_tensor: usize) -> (usize, f64) {
    let h = 1e-5;
    let ws = rich_weights(g, 5);
    let x = batch_for(g, 3, 17);
    let labels: Vec<usize> = (0..3).map(|i| (2 * i) % g.num_classes()).collect();
    let (loss, grads) = loss_and_gradients(g, &ws, &x, &labels).unwrap();
    assert!((loss - loss_at(g, &ws, &x, &labels)).abs() < 1e-12);
    let mut r = rng(23);
    let (mut checked, mut worst) = (0, 0.0f64);
    for (tensor, t) in ws.iter() {
        if !is_learnable(tensor) {
            assert!(!grads.contains(tensor), "{tensor} must not receive a gradient");
            continue;
        }
        let gt = grads.get(tensor).unwrap();
        assert_eq!(gt.shape(), t.shape());
        for _ in 0..per_tensor {
            let i = r.gen_range(0..t.numel());
            let mut plus = ws.clone();
            plus.get_mut(tensor).unwrap().data_mut()[i] += h;
            let mut minus = ws.clone();
            minus.get_mut(tensor).unwrap().data_mut()[i] -= h;
            let numeric = (loss_at(g, &plus, &x, &labels) - loss_at(g, &minus, &x, &labels)) / (2.0 * h);
            let analytic = gt.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}
