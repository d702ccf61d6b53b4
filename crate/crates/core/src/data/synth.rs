use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Splits};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Parameters of [`synth_blobs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            n_per_class: 23,
            height: 28,
            width: 28,
            channels: 1,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Train/val/test sizes for `n` samples of one class: 70/15/15 rounded,
/// with at least one validation and one test sample.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = ((0.15 * n as f64).round() as usize).max(1);
    (train, val, n.saturating_sub(train + val))
}

/// Class-conditional Gaussian blobs.
///
/// Class `c` places a bright blob on a circle of radius `0.25·side` around
/// the image center at angle `2πc/C`, with base width `0.08·side` enlarged by
/// 50% for odd classes. Each sample jitters the center by up to `±0.04·side`
/// and the width by `±10%`, adds `N(0, noise²)` per pixel, clamps to `[0, 1]`
/// and quantizes to multiples of 1/255 (as if stored as bytes). Splits are
/// stratified 70/15/15 per class.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<Splits> {
    if cfg.num_classes < 2 {
        return Err(config_err("synth_blobs needs at least 2 classes"));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(config_err(format!(
            "synth_blobs images must be at least 8x8, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.channels == 0 {
        return Err(config_err("synth_blobs needs at least one channel"));
    }
    if split_sizes(cfg.n_per_class).2 == 0 {
        return Err(config_err(format!(
            "n_per_class = {} is too small for a 70/15/15 split",
            cfg.n_per_class
        )));
    }
    if !(cfg.noise >= 0.0) {
        return Err(config_err("noise must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let side = h.min(w) as f64;
    let plane = h * w;

    let mut per_class: Vec<Vec<Vec<f32>>> = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / cfg.num_classes as f64;
        let cy = h as f64 / 2.0 + 0.25 * side * angle.sin();
        let cx = w as f64 / 2.0 + 0.25 * side * angle.cos();
        let base_sigma = 0.08 * side * if c % 2 == 1 { 1.5 } else { 1.0 };
        let mut samples = Vec::with_capacity(cfg.n_per_class);
        for _ in 0..cfg.n_per_class {
            let jy = cy + rng.gen_range(-0.04..=0.04) * side;
            let jx = cx + rng.gen_range(-0.04..=0.04) * side;
            let sigma = base_sigma * rng.gen_range(0.9..=1.1);
            let mut img = vec![0.0f32; ch * plane];
            for k in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 + 0.5 - jy;
                        let dx = x as f64 + 0.5 - jx;
                        let blob = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                        let eps: f64 = rng.sample(StandardNormal);
                        let v = (blob + cfg.noise * eps).clamp(0.0, 1.0);
                        img[k * plane + y * w + x] = ((v * 255.0).round() / 255.0) as f32;
                    }
                }
            }
            samples.push(img);
        }
        per_class.push(samples);
    }

    let mut parts: [Vec<(Vec<f32>, usize)>; 3] = Default::default();
    for (c, mut samples) in per_class.into_iter().enumerate() {
        samples.shuffle(&mut rng);
        let (n_train, n_val, _) = split_sizes(samples.len());
        for (i, img) in samples.into_iter().enumerate() {
            let which = if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 };
            parts[which].push((img, c));
        }
    }
    let mut build = |name: &str, mut items: Vec<(Vec<f32>, usize)>| -> Result<Dataset> {
        items.shuffle(&mut rng);
        let n = items.len();
        let mut data = Vec::with_capacity(n * ch * plane);
        let mut labels = Vec::with_capacity(n);
        for (img, c) in items {
            data.extend_from_slice(&img);
            labels.push(c);
        }
        Dataset::new(name, Tensor::new(&[n, ch, h, w], data)?, labels, cfg.num_classes)
    };
    let [train, val, test] = parts;
    Ok(Splits {
        train: build("train", train)?,
        val: build("val", val)?,
        test: build("test", test)?,
    })
}
