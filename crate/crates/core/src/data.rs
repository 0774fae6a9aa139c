//! Image datasets: CIFAR binary records, a seeded synthetic generator,
//! normalization, splits and class subsets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Coarse class names of CIFAR-100 in label order.
pub const CIFAR100_COARSE: [&str; 20] = [
    "aquatic_mammals",
    "fish",
    "flowers",
    "food_containers",
    "fruit_and_vegetables",
    "household_electrical_devices",
    "household_furniture",
    "insects",
    "large_carnivores",
    "large_man-made_outdoor_things",
    "large_natural_outdoor_scenes",
    "large_omnivores_and_herbivores",
    "medium_mammals",
    "non-insect_invertebrates",
    "people",
    "reptiles",
    "small_mammals",
    "trees",
    "vehicles_1",
    "vehicles_2",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarFormat {
    Cifar10,
    Cifar100,
}

impl CifarFormat {
    pub fn record_len(self) -> usize {
        match self {
            CifarFormat::Cifar10 => CIFAR_PIXELS + 1,
            CifarFormat::Cifar100 => CIFAR_PIXELS + 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }
}

/// Per-channel statistics of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Labelled `u8` images, channel-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    coarse: Option<Vec<u8>>,
    coarse_names: Vec<String>,
    norm: Normalization,
}

impl Dataset {
    pub fn new(
        shape: (usize, usize, usize),
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
        coarse: Option<Vec<u8>>,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        if pixels.len() != labels.len() * c * h * w {
            return Err(Error::Config(format!(
                "{} pixel bytes do not hold {} images of {c}x{h}x{w}",
                pixels.len(),
                labels.len()
            )));
        }
        if coarse.as_ref().is_some_and(|v| v.len() != labels.len()) {
            return Err(Error::Config("coarse labels do not match fine labels".into()));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= num_classes) {
            return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            channels: c,
            height: h,
            width: w,
            num_classes,
            pixels,
            labels,
            coarse,
            coarse_names: Vec::new(),
            norm: Normalization::identity(c),
        })
    }

    pub fn with_coarse_names(mut self, names: Vec<String>) -> Self {
        self.coarse_names = names;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn coarse_label(&self, i: usize) -> Option<usize> {
        self.coarse.as_ref().map(|c| c[i] as usize)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.norm = norm;
        self
    }

    /// Per-channel mean and (population) standard deviation of this data.
    pub fn compute_normalization(&self) -> Normalization {
        let c = self.channels;
        let plane = self.height * self.width;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, px) in self.image(i).chunks(plane).enumerate() {
                for p in px {
                    let v = *p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Normalization { mean, std }
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for l in &self.labels {
            *out.entry(*l as usize).or_insert(0) += 1;
        }
        out
    }

    /// Samples at `indices`, in that order, keeping the normalization.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coarse: self.coarse.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            coarse_names: self.coarse_names.clone(),
            norm: self.norm.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
        }
    }

    /// Keeps only samples whose fine label is in `classes`.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.label(i))).collect();
        self.select(&idx)
    }

    /// Normalized `(N, C, H, W)` batch of the samples at `indices`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let plane = self.height * self.width;
        let scale: Vec<(f64, f64)> = self
            .norm
            .mean
            .iter()
            .zip(&self.norm.std)
            .map(|(m, s)| (*m, 1.0 / s))
            .collect();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            for (ch, px) in self.image(i).chunks(plane).enumerate() {
                let (m, inv) = scale[ch];
                data.extend(px.iter().map(|p| T::from_f64_lossy((*p as f64 / 255.0 - m) * inv)));
            }
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data).unwrap()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    /// Seeded shuffle, then the first `1 - val_fraction` go to training.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * val_fraction).round() as usize;
        let (val, train) = idx.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.select(&train), self.select(&val)))
    }

    /// Fine classes under a coarse class name (or `group_<i>` for synthetic
    /// data).
    pub fn coarse_members(&self, name: &str) -> Result<BTreeSet<usize>> {
        let coarse = self
            .coarse
            .as_ref()
            .ok_or_else(|| Error::UnknownClass(format!("{name} (dataset has no coarse labels)")))?;
        let idx = self
            .coarse_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))?;
        Ok(self
            .labels
            .iter()
            .zip(coarse)
            .filter(|(_, c)| **c as usize == idx)
            .map(|(l, _)| *l as usize)
            .collect())
    }
}

/// Parses concatenated CIFAR records. CIFAR-10: `<label><3072 pixels>`;
/// CIFAR-100: `<coarse><fine><3072 pixels>`.
pub fn parse_cifar(bytes: &[u8], format: CifarFormat) -> Result<Dataset> {
    let rec = format.record_len();
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec * rec;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "{} bytes is not a multiple of the {rec}-byte record; trailing {} bytes",
                bytes.len(),
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    for (i, r) in bytes.chunks(rec).enumerate() {
        let base = (i * rec) as u64;
        let (head, px) = r.split_at(rec - CIFAR_PIXELS);
        let check = |byte: u8, pos: usize, limit: usize, what: &str| -> Result<u8> {
            if (byte as usize) < limit {
                Ok(byte)
            } else {
                Err(Error::Format {
                    offset: base + pos as u64,
                    message: format!("{what} label {byte} out of range (< {limit})"),
                })
            }
        };
        match format {
            CifarFormat::Cifar10 => labels.push(check(head[0], 0, 10, "class")?),
            CifarFormat::Cifar100 => {
                coarse.push(check(head[0], 0, 20, "coarse")?);
                labels.push(check(head[1], 1, 100, "fine")?);
            }
        }
        pixels.extend_from_slice(px);
    }
    let shape = (3, CIFAR_SIDE, CIFAR_SIDE);
    match format {
        CifarFormat::Cifar10 => Dataset::new(shape, 10, pixels, labels, None),
        CifarFormat::Cifar100 => Ok(Dataset::new(shape, 100, pixels, labels, Some(coarse))?
            .with_coarse_names(CIFAR100_COARSE.iter().map(|s| s.to_string()).collect())),
    }
}

/// Inverse of [`parse_cifar`]; requires 3x32x32 images.
pub fn encode_cifar(ds: &Dataset, format: CifarFormat) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::Config(format!(
            "CIFAR records hold 3x32x32 images, dataset has {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * format.record_len());
    for i in 0..ds.len() {
        if format == CifarFormat::Cifar100 {
            let c = ds
                .coarse_label(i)
                .ok_or_else(|| Error::Config("CIFAR-100 encoding needs coarse labels".into()))?;
            out.push(c as u8);
        }
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

pub fn read_cifar(path: &Path, format: CifarFormat) -> Result<(Dataset, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = parse_cifar(&bytes, format)?;
    Ok((ds, bytes))
}

/// Class-prototype images with per-sample jitter and noise. Classes in the
/// same coarse group share half of their prototype, so groups are visually
/// related.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    /// Classes per coarse group (`group_<i>`).
    #[serde(default = "default_group")]
    pub group_size: usize,
    /// Standard deviation of the per-pixel noise, in `[0, 1]` pixel units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Maximum random translation in pixels.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
    pub seed: u64,
}

fn default_group() -> usize {
    5
}

fn default_noise() -> f64 {
    0.25
}

fn default_shift() -> usize {
    1
}

impl SyntheticSpec {
    pub fn small(num_classes: usize, resolution: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            train_per_class: 60,
            test_per_class: 20,
            resolution,
            group_size: default_group(),
            noise: default_noise(),
            max_shift: default_shift(),
            seed,
        }
    }
}

/// `(train, test)` splits; deterministic in `spec.seed`.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes == 0 || spec.num_classes > 256 || spec.resolution == 0 || spec.group_size == 0 {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let r = spec.resolution;
    let plane = r * r;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let wave = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.5..2.5),
                    rng.gen_range(0.5..2.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        let mut out = vec![0.0; 3 * plane];
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let tint = rng.gen_range(-0.3..0.3);
            for y in 0..r {
                for x in 0..r {
                    let (u, v) = (x as f64 / r as f64, y as f64 / r as f64);
                    let mut s = tint;
                    for (k, &(fx, fy, ph, a)) in waves.iter().enumerate() {
                        let phase = ph + ch as f64 * (k as f64 + 1.0);
                        s += a * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin() / 3.0;
                    }
                    chunk[y * r + x] = s;
                }
            }
        }
        out
    };
    let groups = spec.num_classes.div_ceil(spec.group_size);
    let group_base: Vec<Vec<f64>> = (0..groups).map(|_| wave(&mut rng)).collect();
    let protos: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| {
            let own = wave(&mut rng);
            own.iter()
                .zip(&group_base[c / spec.group_size])
                .map(|(a, b)| 0.5 * a + 0.5 * b)
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).unwrap();
    let shift = spec.max_shift as isize;
    let make = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let n = per_class * spec.num_classes;
        let mut pixels = Vec::with_capacity(n * 3 * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.num_classes;
            let (dy, dx) = (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift));
            for ch in 0..3 {
                for y in 0..r as isize {
                    for x in 0..r as isize {
                        let sy = (y + dy).rem_euclid(r as isize) as usize;
                        let sx = (x + dx).rem_euclid(r as isize) as usize;
                        let v = 0.5 + 0.5 * protos[c][ch * plane + sy * r + sx] + noise.sample(rng);
                        pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            labels.push(c as u8);
        }
        let coarse = labels.iter().map(|l| (*l as usize / spec.group_size) as u8).collect();
        Ok(Dataset::new((3, r, r), spec.num_classes, pixels, labels, Some(coarse))?
            .with_coarse_names((0..groups).map(|g| format!("group_{g}")).collect()))
    };
    let train = make(spec.train_per_class, &mut rng)?;
    let test = make(spec.test_per_class, &mut rng)?;
    let norm = train.compute_normalization();
    Ok((train.with_normalization(norm.clone()), test.with_normalization(norm)))
}

/// How a deployment subset is chosen: explicit fine ids, coarse-class names,
/// or `random:<k>` fine classes drawn with the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSelector {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coarse: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<usize>,
}

impl SubsetSelector {
    pub fn classes(name: &str, ids: &[usize]) -> Self {
        SubsetSelector {
            name: name.into(),
            classes: ids.to_vec(),
            coarse: vec![],
            random: None,
        }
    }

    /// Parses `random:<k>`, `coarse:<name>[,<name>]` or a comma-separated id
    /// list.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid subset selector '{text}'"));
        let mut sel = SubsetSelector::classes(text, &[]);
        if let Some(k) = text.strip_prefix("random:") {
            sel.random = Some(k.parse().map_err(|_| bad())?);
        } else if let Some(names) = text.strip_prefix("coarse:") {
            sel.coarse = names.split(',').map(str::to_string).collect();
        } else {
            sel.classes = text
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
        }
        Ok(sel)
    }

    pub fn resolve(&self, dataset: &Dataset, seed: u64) -> Result<BTreeSet<usize>> {
        let mut out = BTreeSet::new();
        for &c in &self.classes {
            if c >= dataset.num_classes() {
                return Err(Error::UnknownClass(c.to_string()));
            }
            out.insert(c);
        }
        for name in &self.coarse {
            out.extend(dataset.coarse_members(name)?);
        }
        if let Some(k) = self.random {
            if k == 0 || k > dataset.num_classes() {
                return Err(Error::UnknownClass(format!("random:{k}")));
            }
            let mut all: Vec<usize> = (0..dataset.num_classes()).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            out.extend(all.into_iter().take(k));
        }
        if out.is_empty() {
            return Err(Error::UnknownClass(format!("subset '{}' selects no classes", self.name)));
        }
        Ok(out)
    }
}

/// Editable subset templates: names only, class lists left to the user.
pub fn subset_templates() -> Vec<SubsetSelector> {
    ["aquatic", "indoors", "natural", "random"]
        .iter()
        .map(|n| SubsetSelector::classes(n, &[]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub format: String,
    pub records: usize,
    pub per_class_counts: BTreeMap<usize, usize>,
    pub normalization: Normalization,
    pub digest: String,
}

pub fn summarize(format: &str, train: &Dataset, digest: String) -> IngestSummary {
    IngestSummary {
        format: format.into(),
        records: train.len(),
        per_class_counts: train.class_counts(),
        normalization: train.compute_normalization(),
        digest,
    }
}
