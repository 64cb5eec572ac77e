//! Keypoint-aware training-time augmentation: random horizontal flips,
//! photometric distortions, and coarse dropout, applied in that fixed order.
//!
//! Each sample consumes randomness only from its own counter-based stream, so
//! results are independent of iteration order and worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::landmark::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotometricConfig {
    /// Max brightness shift on the [0,1] intensity scale.
    pub brightness_delta: f64,
    /// Contrast factor range, applied about the image mean.
    pub contrast_range: (f64, f64),
    /// Per-op activation probability.
    pub prob: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 32.0 / 255.0,
            contrast_range: (0.75, 1.25),
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseDropoutConfig {
    pub max_holes: usize,
    /// Hole side length as a fraction of min(H, W).
    pub hole_size_range: (f64, f64),
    pub prob: f64,
}

impl Default for CoarseDropoutConfig {
    fn default() -> Self {
        Self {
            max_holes: 4,
            hole_size_range: (0.05, 0.15),
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub photometric: PhotometricConfig,
    pub coarse_dropout: CoarseDropoutConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            photometric: PhotometricConfig::default(),
            coarse_dropout: CoarseDropoutConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: compose becomes the identity.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            photometric: PhotometricConfig {
                prob: 0.0,
                ..Default::default()
            },
            coarse_dropout: CoarseDropoutConfig {
                prob: 0.0,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [self.flip_prob, self.photometric.prob, self.coarse_dropout.prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("augment probabilities must be in [0,1]".into());
        }
        if self.photometric.contrast_range.0 > self.photometric.contrast_range.1
            || self.coarse_dropout.hole_size_range.0 > self.coarse_dropout.hole_size_range.1
        {
            return Err("augment ranges must be ordered".into());
        }
        Ok(())
    }
}

/// Deterministic per-sample random stream derived from (seed, step, sample).
pub fn sample_rng(seed: u64, step: u64, sample: u64) -> ChaCha8Rng {
    // splitmix-style mixing of the three counters
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(step.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(sample.wrapping_mul(0x94d049bb133111eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    ChaCha8Rng::seed_from_u64(z)
}

/// Mirrors a (1, H, W) image about the vertical axis and swaps paired
/// landmark indices; x' = (width−1) − x per the pixel-center convention.
pub fn flip_h(
    img: &Tensor<f32>,
    lms: &LandmarkSet,
    flip_pairs: &[(usize, usize)],
) -> (Tensor<f32>, LandmarkSet) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = img.data()[y * w + (w - 1 - x)];
        }
    }
    let mut points: Vec<(f64, f64)> = lms
        .points
        .iter()
        .map(|&(x, y)| ((w - 1) as f64 - x, y))
        .collect();
    let mut visibility = lms.visibility.clone();
    for &(a, b) in flip_pairs {
        points.swap(a, b);
        visibility.swap(a, b);
    }
    (
        Tensor::new(vec![1, h, w], out),
        LandmarkSet { points, visibility },
    )
}

/// Optional brightness shift then contrast scale about the image mean, each
/// with its own activation draw; output clamped to [0,1]. Landmarks untouched.
pub fn photometric(img: &Tensor<f32>, rng: &mut ChaCha8Rng, cfg: &PhotometricConfig) -> Tensor<f32> {
    let mut out = img.clone();
    if rng.gen::<f64>() < cfg.prob {
        let delta = rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta) as f32;
        for v in out.data_mut() {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }
    if rng.gen::<f64>() < cfg.prob {
        let factor = rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1) as f32;
        let mean = out.data().iter().sum::<f32>() / out.numel() as f32;
        for v in out.data_mut() {
            *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Axis-aligned rectangle blanked by coarse dropout: (x, y, w, h).
pub type Hole = (usize, usize, usize, usize);

/// Fills up to `max_holes` random rectangles with the (pre-hole) image mean.
/// Landmarks and visibility are left untouched.
pub fn coarse_dropout(
    img: &Tensor<f32>,
    rng: &mut ChaCha8Rng,
    cfg: &CoarseDropoutConfig,
) -> (Tensor<f32>, Vec<Hole>) {
    if rng.gen::<f64>() >= cfg.prob || cfg.max_holes == 0 {
        return (img.clone(), Vec::new());
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mean = img.data().iter().sum::<f32>() / img.numel() as f32;
    let mut out = img.clone();
    let n_holes = rng.gen_range(1..=cfg.max_holes);
    let min_dim = h.min(w) as f64;
    let mut holes = Vec::with_capacity(n_holes);
    for _ in 0..n_holes {
        let side = (rng.gen_range(cfg.hole_size_range.0..=cfg.hole_size_range.1) * min_dim)
            .round()
            .max(1.0) as usize;
        let side = side.min(w).min(h);
        let x0 = rng.gen_range(0..=w - side);
        let y0 = rng.gen_range(0..=h - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                out.data_mut()[y * w + x] = mean;
            }
        }
        holes.push((x0, y0, side, side));
    }
    (out, holes)
}

/// One training sample: image plus its landmarks in original space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub img: Tensor<f32>,
    pub landmarks: LandmarkSet,
}

/// Applies flip → photometric → coarse dropout, drawing randomness only from
/// the provided per-sample stream.
pub fn compose(
    cfg: &AugmentConfig,
    sample: &Sample,
    flip_pairs: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Sample {
    let (img, landmarks) = if rng.gen::<f64>() < cfg.flip_prob {
        flip_h(&sample.img, &sample.landmarks, flip_pairs)
    } else {
        (sample.img.clone(), sample.landmarks.clone())
    };
    let img = photometric(&img, rng, &cfg.photometric);
    let (img, _holes) = coarse_dropout(&img, rng, &cfg.coarse_dropout);
    Sample { img, landmarks }
}
