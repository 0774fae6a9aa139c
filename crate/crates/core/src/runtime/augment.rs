//! Per-sample training augmentation on normalized NCHW batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Reflect-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: Option<usize>,
    pub horizontal_flip: bool,
    /// Uniform rotation in `±degrees`, nearest-neighbour, zero fill.
    pub rotation_degrees: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_pad: Some(4),
            horizontal_flip: true,
            rotation_degrees: None,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig {
            crop_pad: None,
            horizontal_flip: false,
            rotation_degrees: None,
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Mirrors every plane of one sample left-right.
pub fn flip_horizontal<T: Scalar>(sample: &mut [T], width: usize) {
    for row in sample.chunks_mut(width) {
        row.reverse();
    }
}

fn crop<T: Scalar>(sample: &mut [T], h: usize, w: usize, pad: usize, dy: usize, dx: usize) {
    let src = sample.to_vec();
    for (plane_in, plane_out) in src.chunks(h * w).zip(sample.chunks_mut(h * w)) {
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            for x in 0..w {
                let sx = reflect(x as isize + dx as isize - pad as isize, w);
                plane_out[y * w + x] = plane_in[sy * w + sx];
            }
        }
    }
}

fn rotate<T: Scalar>(sample: &mut [T], h: usize, w: usize, degrees: f64) {
    let src = sample.to_vec();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for (plane_in, plane_out) in src.chunks(h * w).zip(sample.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let sy = (c * ry - s * rx + cy).round();
                let sx = (s * ry + c * rx + cx).round();
                plane_out[y * w + x] = if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                    plane_in[sy as usize * w + sx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Applies the enabled augmentations independently to each sample. Random
/// draws happen in a fixed order (crop offsets, flip coin, angle) so runs are
/// reproducible for a given generator state.
pub fn augment<T: Scalar, R: Rng>(batch: &mut Tensor<T>, config: &AugmentConfig, rng: &mut R) {
    let shape = batch.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let per = shape[1] * h * w;
    for sample in batch.data_mut().chunks_mut(per) {
        if let Some(pad) = config.crop_pad.filter(|p| *p > 0) {
            let pad = pad.min(h.min(w).saturating_sub(1));
            let dy = rng.gen_range(0..=2 * pad);
            let dx = rng.gen_range(0..=2 * pad);
            crop(sample, h, w, pad, dy, dx);
        }
        if config.horizontal_flip && rng.gen_bool(0.5) {
            flip_horizontal(sample, w);
        }
        if let Some(deg) = config.rotation_degrees.filter(|d| *d > 0.0) {
            let angle = rng.gen_range(-deg..=deg);
            rotate(sample, h, w, angle);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Tensor<f32> {
        Tensor::new(vec![2, 3, 5, 5], (0..150).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn all_off_is_identity() {
        let mut b = batch();
        augment(&mut b, &AugmentConfig::off(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(b, batch());
    }

    #[test]
    fn zero_pad_crop_is_identity() {
        let cfg = AugmentConfig {
            crop_pad: Some(0),
            ..AugmentConfig::off()
        };
        let mut b = batch();
        augment(&mut b, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(b, batch());
    }

    #[test]
    fn flip_is_an_involution() {
        let mut b = batch();
        flip_horizontal(b.data_mut(), 5);
        assert_ne!(b, batch());
        flip_horizontal(b.data_mut(), 5);
        assert_eq!(b, batch());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let mut b = batch();
        rotate(b.data_mut(), 5, 5, 0.0);
        assert_eq!(b, batch());
    }
}
