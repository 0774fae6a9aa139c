use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::{forward, train_step, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ir::ModelGraph;
use crate::tensor::{is_learnable, Scalar, WeightStore};

/// Step decay: the rate is multiplied by `gamma` at the start of every epoch
/// listed in `decay_epochs` (1-indexed within one training call).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            decay_epochs: vec![15, 25],
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay_epochs: vec![],
            gamma: default_gamma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.initial)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Rate in effect during 1-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|d| **d <= epoch).count();
        self.initial * self.gamma.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::default(),
            epochs: 30,
            seed: 0,
            augment: AugmentConfig::default(),
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        self.lr_schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar = f32> {
    /// Checkpoint with the highest validation accuracy (earliest on ties).
    pub weights: WeightStore<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
}

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy with BatchNorm in eval mode.
pub fn evaluate<T: Scalar>(graph: &ModelGraph, weights: &WeightStore<T>, split: &Dataset) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation split has no samples".into()));
    }
    let k = graph.num_classes();
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = forward(graph, weights, &split.batch::<T>(chunk), Mode::Eval)?;
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            // first maximum wins
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            let label = split.label(i);
            if label >= k {
                return Err(Error::ShapeMismatch {
                    name: "labels".into(),
                    expected: vec![k],
                    found: vec![label],
                });
            }
            counts[label] += 1;
            if pred == label {
                hits[label] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / split.len() as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(h, c)| (*c > 0).then(|| *h as f64 / *c as f64))
            .collect(),
        correct,
        total: split.len(),
    })
}

/// Seeded 80:20 (per `val_fraction`) split, then [`train_split`].
pub fn train<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (tr, val) = dataset.split(config.val_fraction, config.seed)?;
    train_split(graph, weights, &tr, &val, config)
}

/// SGD with momentum and weight decay (`v = mu*v + g + wd*w; w -= lr*v`),
/// keeping the best-validation checkpoint.
pub fn train_split<T: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    weights.check_against(graph)?;
    let mut out = TrainOutcome {
        weights: weights.clone(),
        history: Vec::new(),
        best_epoch: None,
        best_val_accuracy: None,
    };
    if config.epochs == 0 {
        return Ok(out);
    }
    if train_set.is_empty() {
        return Err(Error::EmptySplit("training split has no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = weights.clone();
    let mut velocity: BTreeMap<String, Vec<T>> = BTreeMap::new();
    let mu = T::from_f64_lossy(config.momentum);
    let wd = T::from_f64_lossy(config.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let lr_f = config.lr_schedule.lr_at(epoch);
        let lr = T::from_f64_lossy(lr_f);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = train_set.batch::<T>(chunk);
            augment(&mut batch, &config.augment, &mut rng);
            let labels = train_set.labels_of(chunk);
            let (loss, grads) = train_step(graph, &mut current, &batch, &labels, epoch, step)?;
            loss_sum += loss * chunk.len() as f64;
            for (name, g) in grads.iter() {
                debug_assert!(is_learnable(name));
                let w = current.get_mut(name)?;
                let v = velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![T::zero(); g.numel()]);
                for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vi = mu * *vi + *gi + wd * *wi;
                    *wi -= lr * *vi;
                }
            }
        }
        let val = evaluate(graph, &current, val_set)?.accuracy;
        out.history.push(EpochRecord {
            epoch,
            lr: lr_f,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy: val,
        });
        if out.best_val_accuracy.map_or(true, |b| val > b) {
            out.best_val_accuracy = Some(val);
            out.best_epoch = Some(epoch);
            out.weights = current.clone();
        }
    }
    Ok(out)
}
