use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, Mode};
use crate::error::{Error, Result};
use crate::ir::{count_ops, ModelGraph};
use crate::tensor::{Scalar, Tensor, WeightStore};

const WARMUP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub warmup: usize,
    /// One wall-clock sample per timed repetition, milliseconds.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub per_image_ms: f64,
    pub giga_ops: f64,
}

/// Host wall-clock latency of eval-mode inference on a seeded random batch.
pub fn bench_inference<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    batch_size: usize,
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions < 10 {
        return Err(Error::Config(format!("at least 10 repetitions required, got {repetitions}")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let s = graph.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = vec![batch_size, s.channels(), s.height(), s.width()];
    let n = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect())?;
    for _ in 0..WARMUP {
        forward(graph, weights, &x, Mode::Eval)?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        let y = forward(graph, weights, &x, Mode::Eval)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    let mean = samples.iter().sum::<f64>() / repetitions as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repetitions - 1) as f64;
    Ok(LatencyStats {
        batch_size,
        warmup: WARMUP,
        mean_ms: mean,
        std_ms: var.sqrt(),
        per_image_ms: mean / batch_size as f64,
        samples_ms: samples,
        giga_ops: count_ops(graph).total_giga_ops,
    })
}
