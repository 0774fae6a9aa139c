//! Minimal CNN runtime: forward pass, reverse-mode gradients, SGD training,
//! augmentation, evaluation and latency benchmarking. Single-threaded and
//! deterministic; generic over `f32` (experiments) and `f64` (gradient checks).

pub mod augment;
mod bench;
pub mod container;
mod kernels;
mod train;

pub use augment::{augment, flip_horizontal, AugmentConfig};
pub use bench::{bench_inference, LatencyStats};
pub use container::{decode_weights, encode_weights, load_weights, save_weights};
pub use train::{evaluate, train, train_split, EpochRecord, Evaluation, LrSchedule, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ir::{LayerKind, ModelGraph};
use crate::tensor::{tensor_name, Scalar, Tensor, WeightStore};
use kernels::{BnBatch, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm normalizes with batch statistics.
    Train,
    /// BatchNorm uses the running statistics.
    Eval,
}

/// He-normal conv filters, uniform `±1/sqrt(in)` linear layers, zero conv
/// biases, identity BatchNorm.
pub fn init_weights(graph: &ModelGraph, seed: u64) -> WeightStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightStore::new();
    for node in graph.nodes() {
        let id = &node.id;
        match &node.kind {
            LayerKind::Conv(p) => {
                let dims = p.weight_dims();
                let fan_in = (p.fan_in_channels() * p.kernel * p.kernel) as f32;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                let n = dims.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                ws.insert(tensor_name(id, "weight"), Tensor::new(dims, data).unwrap());
                if p.has_bias {
                    ws.insert(tensor_name(id, "bias"), Tensor::zeros(vec![p.out_channels]));
                }
            }
            LayerKind::BatchNorm(p) => {
                let c = p.channels;
                ws.insert(tensor_name(id, "gamma"), Tensor::filled(vec![c], 1.0));
                ws.insert(tensor_name(id, "beta"), Tensor::zeros(vec![c]));
                ws.insert(tensor_name(id, "running_mean"), Tensor::zeros(vec![c]));
                ws.insert(tensor_name(id, "running_var"), Tensor::filled(vec![c], 1.0));
            }
            LayerKind::Linear(p) => {
                let bound = 1.0 / (p.in_features as f32).sqrt();
                let mut draw = |n: usize| -> Vec<f32> {
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                let w = draw(p.in_features * p.out_features);
                let b = draw(p.out_features);
                ws.insert(
                    tensor_name(id, "weight"),
                    Tensor::new(vec![p.out_features, p.in_features], w).unwrap(),
                );
                ws.insert(tensor_name(id, "bias"), Tensor::new(vec![p.out_features], b).unwrap());
            }
            _ => {}
        }
    }
    ws
}

enum Aux<T> {
    None,
    Bn(BnBatch<T>),
    Pool(Vec<usize>),
}

/// Every node's output plus what the backward pass needs.
struct Trace<T> {
    input: Vec<T>,
    input_dims: Dims,
    outputs: Vec<Vec<T>>,
    dims: Vec<Dims>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Trace<T> {
    fn producer<'a>(&'a self, graph: &ModelGraph, id: &str) -> (&'a [T], Dims) {
        match graph.position(id) {
            Some(p) => (&self.outputs[p], self.dims[p]),
            None => (&self.input, self.input_dims),
        }
    }

    fn logits(&self, graph: &ModelGraph) -> Tensor<T> {
        let last = self.outputs.len() - 1;
        let d = self.dims[last];
        Tensor::new(vec![d.n, graph.num_classes()], self.outputs[last].clone()).unwrap()
    }
}

fn check_batch<T: Scalar>(graph: &ModelGraph, batch: &Tensor<T>) -> Result<Dims> {
    let s = graph.input_shape();
    let expected = [s.channels(), s.height(), s.width()];
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != expected || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            name: "input".into(),
            expected: [&[shape.first().copied().unwrap_or(1)][..], &expected].concat(),
            found: shape.to_vec(),
        });
    }
    Ok(Dims {
        n: shape[0],
        c: shape[1],
        h: shape[2],
        w: shape[3],
    })
}

fn run<T: Scalar>(graph: &ModelGraph, ws: &WeightStore<T>, batch: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
    let input_dims = check_batch(graph, batch)?;
    ws.check_against(graph)?;
    let mut tr = Trace {
        input: batch.data().to_vec(),
        input_dims,
        outputs: Vec::with_capacity(graph.nodes().len()),
        dims: Vec::with_capacity(graph.nodes().len()),
        aux: Vec::with_capacity(graph.nodes().len()),
    };
    for node in graph.nodes() {
        let (x, d) = tr.producer(graph, &node.inputs[0]);
        let id = &node.id;
        let (out, od, aux) = match &node.kind {
            LayerKind::Conv(p) => {
                let w = ws.param(id, "weight")?.data();
                let b = if p.has_bias { Some(ws.param(id, "bias")?.data()) } else { None };
                let (o, od) = if p.groups > 1 {
                    kernels::depthwise_forward(x, d, p, w, b)
                } else {
                    kernels::conv_forward(x, d, p, w, b)
                };
                (o, od, Aux::None)
            }
            LayerKind::BatchNorm(p) => {
                let gamma = ws.param(id, "gamma")?.data();
                let beta = ws.param(id, "beta")?.data();
                match mode {
                    Mode::Train => {
                        let (o, cache) = kernels::bn_train_forward(x, d, gamma, beta, p.epsilon);
                        (o, d, Aux::Bn(cache))
                    }
                    Mode::Eval => {
                        let mean = ws.param(id, "running_mean")?.data();
                        let var = ws.param(id, "running_var")?.data();
                        (kernels::bn_eval_forward(x, d, gamma, beta, mean, var, p.epsilon), d, Aux::None)
                    }
                }
            }
            LayerKind::ReLU => (
                x.iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect(),
                d,
                Aux::None,
            ),
            LayerKind::MaxPool(p) => {
                let (o, arg, od) = kernels::maxpool_forward(x, d, p.kernel, p.stride);
                (o, od, Aux::Pool(arg))
            }
            LayerKind::GlobalAvgPool => {
                let area = T::from_usize(d.plane()).unwrap();
                let o = x.chunks(d.plane()).map(|c| c.iter().copied().sum::<T>() / area).collect();
                (o, Dims { h: 1, w: 1, ..d }, Aux::None)
            }
            LayerKind::Flatten => (
                x.to_vec(),
                Dims {
                    n: d.n,
                    c: d.c * d.plane(),
                    h: 1,
                    w: 1,
                },
                Aux::None,
            ),
            LayerKind::Linear(p) => {
                let w = ws.param(id, "weight")?.data();
                let b = ws.param(id, "bias")?.data();
                let o = kernels::linear_forward(x, d.n, p.in_features, p.out_features, w, b);
                (
                    o,
                    Dims {
                        n: d.n,
                        c: p.out_features,
                        h: 1,
                        w: 1,
                    },
                    Aux::None,
                )
            }
            LayerKind::Add => {
                let (y, _) = tr.producer(graph, &node.inputs[1]);
                (x.iter().zip(y).map(|(a, b)| *a + *b).collect(), d, Aux::None)
            }
            LayerKind::Concat => {
                let parts: Vec<(&[T], Dims)> = node.inputs.iter().map(|i| tr.producer(graph, i)).collect();
                let c: usize = parts.iter().map(|(_, pd)| pd.c).sum();
                let plane = d.plane();
                let mut o = Vec::with_capacity(d.n * c * plane);
                for ni in 0..d.n {
                    for (data, pd) in &parts {
                        o.extend_from_slice(&data[ni * pd.c * plane..(ni + 1) * pd.c * plane]);
                    }
                }
                (o, Dims { c, ..d }, Aux::None)
            }
        };
        tr.outputs.push(out);
        tr.dims.push(od);
        tr.aux.push(aux);
    }
    Ok(tr)
}

/// Logits `(N, num_classes)`. In [`Mode::Train`] BatchNorm uses batch
/// statistics; running statistics are left untouched (see [`forward_train`]).
pub fn forward<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    Ok(run(graph, weights, batch, mode)?.logits(graph))
}

/// Train-mode forward that also folds the batch statistics into the running
/// statistics (`running = (1 - momentum) * running + momentum * batch`, with
/// the unbiased batch variance).
pub fn forward_train<T: Scalar>(
    graph: &ModelGraph,
    weights: &mut WeightStore<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tr = run(graph, weights, batch, Mode::Train)?;
    update_running_stats(graph, weights, &tr)?;
    Ok(tr.logits(graph))
}

fn update_running_stats<T: Scalar>(graph: &ModelGraph, ws: &mut WeightStore<T>, tr: &Trace<T>) -> Result<()> {
    for (pos, node) in graph.nodes().iter().enumerate() {
        let (LayerKind::BatchNorm(p), Aux::Bn(cache)) = (&node.kind, &tr.aux[pos]) else {
            continue;
        };
        let d = tr.producer(graph, &node.inputs[0]).1;
        let m = (d.n * d.plane()) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let mom = T::from_f64_lossy(p.momentum);
        let keep = T::one() - mom;
        let rm = ws.get_mut(&tensor_name(&node.id, "running_mean"))?;
        for (r, b) in rm.data_mut().iter_mut().zip(&cache.mean) {
            *r = keep * *r + mom * *b;
        }
        let rv = ws.get_mut(&tensor_name(&node.id, "running_var"))?;
        let unbias = T::from_f64_lossy(unbias);
        for (r, b) in rv.data_mut().iter_mut().zip(&cache.var) {
            *r = keep * *r + mom * *b * unbias;
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            name: "labels".into(),
            expected: vec![n],
            found: vec![labels.len()],
        });
    }
    let mut grad = vec![T::zero(); n * k];
    let mut loss = 0.0;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    for (i, row) in logits.data().chunks(k).enumerate() {
        let label = labels[i];
        if label >= k {
            return Err(Error::ShapeMismatch {
                name: "labels".into(),
                expected: vec![k],
                found: vec![label],
            });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += (z.ln() - (row[label] - max)).as_f64();
        for j in 0..k {
            let p = exps[j] / z;
            let t = if j == label { T::one() } else { T::zero() };
            grad[i * k + j] = (p - t) * inv_n;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad).unwrap()))
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn backward<T: Scalar>(graph: &ModelGraph, ws: &WeightStore<T>, tr: &Trace<T>, dlogits: Vec<T>) -> Result<WeightStore<T>> {
    let nodes = graph.nodes();
    let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
    let mut out = WeightStore::new();
    *grads.last_mut().unwrap() = Some(dlogits);
    let send = |grads: &mut Vec<Option<Vec<T>>>, producer: &str, g: Vec<T>| {
        if let Some(p) = graph.position(producer) {
            accumulate(&mut grads[p], g);
        }
    };
    for pos in (0..nodes.len()).rev() {
        let Some(dout) = grads[pos].take() else {
            continue;
        };
        let node = &nodes[pos];
        let id = &node.id;
        let src = &node.inputs[0];
        let need_dx = graph.position(src).is_some();
        let (x, d) = tr.producer(graph, src);
        match &node.kind {
            LayerKind::Conv(p) => {
                let w = ws.param(id, "weight")?;
                let (dx, dw, db) = if p.groups > 1 {
                    kernels::depthwise_backward(x, d, p, w.data(), &dout, need_dx)
                } else {
                    kernels::conv_backward(x, d, p, w.data(), &dout, need_dx)
                };
                out.insert(tensor_name(id, "weight"), Tensor::new(w.shape().to_vec(), dw)?);
                if p.has_bias {
                    out.insert(tensor_name(id, "bias"), Tensor::new(vec![p.out_channels], db)?);
                }
                if let Some(dx) = dx {
                    send(&mut grads, src, dx);
                }
            }
            LayerKind::BatchNorm(p) => {
                let Aux::Bn(cache) = &tr.aux[pos] else {
                    return Err(Error::Config("backward requires a train-mode forward".into()));
                };
                let gamma = ws.param(id, "gamma")?.data();
                let (dx, dg, db) = kernels::bn_backward(&dout, d, gamma, cache);
                out.insert(tensor_name(id, "gamma"), Tensor::new(vec![p.channels], dg)?);
                out.insert(tensor_name(id, "beta"), Tensor::new(vec![p.channels], db)?);
                send(&mut grads, src, dx);
            }
            LayerKind::ReLU => {
                let y = &tr.outputs[pos];
                let dx = dout
                    .iter()
                    .zip(y)
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                send(&mut grads, src, dx);
            }
            LayerKind::MaxPool(_) => {
                let Aux::Pool(arg) = &tr.aux[pos] else { unreachable!() };
                let mut dx = vec![T::zero(); d.numel()];
                for (g, &i) in dout.iter().zip(arg) {
                    dx[i] += *g;
                }
                send(&mut grads, src, dx);
            }
            LayerKind::GlobalAvgPool => {
                let area = T::from_usize(d.plane()).unwrap();
                let mut dx = Vec::with_capacity(d.numel());
                for g in &dout {
                    dx.extend(std::iter::repeat(*g / area).take(d.plane()));
                }
                send(&mut grads, src, dx);
            }
            LayerKind::Flatten => send(&mut grads, src, dout),
            LayerKind::Linear(p) => {
                let w = ws.param(id, "weight")?.data();
                let (dx, dw, db) = kernels::linear_backward(x, d.n, p.in_features, p.out_features, w, &dout);
                out.insert(tensor_name(id, "weight"), Tensor::new(vec![p.out_features, p.in_features], dw)?);
                out.insert(tensor_name(id, "bias"), Tensor::new(vec![p.out_features], db)?);
                send(&mut grads, src, dx);
            }
            LayerKind::Add => {
                send(&mut grads, &node.inputs[1], dout.clone());
                send(&mut grads, src, dout);
            }
            LayerKind::Concat => {
                let plane = d.plane();
                let total = tr.dims[pos].c;
                let mut offset = 0;
                for inp in &node.inputs {
                    let pc = tr.producer(graph, inp).1.c;
                    let mut dx = Vec::with_capacity(d.n * pc * plane);
                    for ni in 0..d.n {
                        let start = (ni * total + offset) * plane;
                        dx.extend_from_slice(&dout[start..start + pc * plane]);
                    }
                    send(&mut grads, inp, dx);
                    offset += pc;
                }
            }
        }
    }
    Ok(out)
}

fn check_finite<T: Scalar>(loss: f64, grads: &WeightStore<T>, stage: &str, epoch: usize, step: usize) -> Result<()> {
    let bad = !loss.is_finite() || grads.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite()));
    if bad {
        return Err(Error::NonFinite {
            stage: stage.into(),
            epoch,
            step,
        });
    }
    Ok(())
}

/// Mean cross-entropy and gradients of every learnable tensor, with
/// BatchNorm in batch-statistics mode. Running statistics are not updated.
pub fn loss_and_gradients<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, WeightStore<T>)> {
    let tr = run(graph, weights, batch, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&tr.logits(graph), labels)?;
    let grads = backward(graph, weights, &tr, dlogits.into_data())?;
    check_finite(loss, &grads, "loss_and_gradients", 0, 0)?;
    Ok((loss, grads))
}

/// One training step's forward/backward; also updates running statistics.
pub(crate) fn train_step<T: Scalar>(
    graph: &ModelGraph,
    weights: &mut WeightStore<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    epoch: usize,
    step: usize,
) -> Result<(f64, WeightStore<T>)> {
    let tr = run(graph, weights, batch, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&tr.logits(graph), labels)?;
    let grads = backward(graph, weights, &tr, dlogits.into_data())?;
    check_finite(loss, &grads, "train", epoch, step)?;
    update_running_stats(graph, weights, &tr)?;
    Ok((loss, grads))
}

/// Output shape bookkeeping for memory estimates: activations per sample.
pub fn activation_floats_per_sample(graph: &ModelGraph) -> usize {
    graph.nodes().iter().enumerate().map(|(p, _)| graph.shape_at(p).numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, FixtureSize};
    use crate::ir::{ConvParams, LayerNode, LinearParams, TensorShape, GRAPH_INPUT};

    fn random_batch<T: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn identity_one_by_one_conv() {
        let g = ModelGraph::new(
            "id",
            TensorShape::feature_map(3, 4, 4),
            48,
            vec![
                LayerNode::new("c", LayerKind::Conv(ConvParams::new(3, 3, 1).with_bias(true)), &[GRAPH_INPUT]),
                LayerNode::new("flatten", LayerKind::Flatten, &["c"]),
                LayerNode::new(
                    "fc",
                    LayerKind::Linear(LinearParams {
                        in_features: 48,
                        out_features: 48,
                    }),
                    &["flatten"],
                ),
            ],
        )
        .unwrap();
        let mut ws = WeightStore::<f64>::new();
        let eye = |n: usize| {
            let mut v = vec![0.0; n * n];
            for i in 0..n {
                v[i * n + i] = 1.0;
            }
            v
        };
        ws.insert("c.weight", Tensor::new(vec![3, 3, 1, 1], eye(3)).unwrap());
        ws.insert("c.bias", Tensor::zeros(vec![3]));
        ws.insert("fc.weight", Tensor::new(vec![48, 48], eye(48)).unwrap());
        ws.insert("fc.bias", Tensor::zeros(vec![48]));
        let x = random_batch::<f64>(vec![2, 3, 4, 4], 1);
        let y = forward(&g, &ws, &x, Mode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = fixtures::by_name("tiny-resnet", FixtureSize { resolution: 8, width: 4, num_classes: 5 }).unwrap();
        let mut ws = init_weights(&g, 0);
        for (name, t) in ws.iter_mut() {
            if !name.ends_with("running_var") && !name.ends_with("gamma") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random_batch::<f32>(vec![3, 3, 8, 8], 2);
        let y = forward(&g, &ws, &x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::<f64>::zeros(vec![4, 7]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6, 2]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wrong_batch_shape_rejected() {
        let g = fixtures::toy2().unwrap();
        let ws = init_weights(&g, 0);
        let x = Tensor::<f32>::zeros(vec![2, 3, 5, 6]);
        assert!(matches!(forward(&g, &ws, &x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let g = fixtures::toy2().unwrap();
        let mut ws = init_weights(&g, 0);
        let x = random_batch::<f32>(vec![4, 3, 6, 6], 3);
        forward_train(&g, &mut ws, &x).unwrap();
        let rm = ws.param("bn1", "running_mean").unwrap().data().to_vec();
        // recompute the batch mean of conv1's output independently
        let w = init_weights(&g, 0);
        let mut probe = WeightStore::new();
        for (k, v) in w.iter() {
            probe.insert(k.clone(), v.clone());
        }
        let tr = run(&g, &probe, &x, Mode::Train).unwrap();
        let conv = &tr.outputs[g.position("conv1").unwrap()];
        for c in 0..4 {
            let mut s = 0.0f64;
            for n in 0..4 {
                s += conv[(n * 4 + c) * 36..(n * 4 + c + 1) * 36].iter().map(|v| *v as f64).sum::<f64>();
            }
            assert!((rm[c] as f64 - 0.1 * s / 144.0).abs() < 1e-6);
        }
    }
}
