//! Training-time mitigations: data augmentation, l2 weight decay and
//! differentially private gradient aggregation (per-sample clipping plus
//! Gaussian noise).
//!
//! Privacy accounting is not implemented; runs are described by the raw
//! `(clip_norm, noise_multiplier, epochs, batch_size)` tuple.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::synthdata::{ImageTensor, ImageTextPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        Ok(())
    }
}

pub fn hflip(image: &ImageTensor) -> ImageTensor {
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                out.set(y, x, c, image.get(y, image.width - 1 - x, c));
            }
        }
    }
    out
}

/// Shifts by `(dy, dx)` pixels, replicating edge pixels into the gap.
pub fn translate(image: &ImageTensor, dy: i32, dx: i32) -> ImageTensor {
    let mut out = image.clone();
    let clampi = |v: i32, n: usize| v.clamp(0, n as i32 - 1) as usize;
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                let sy = clampi(y as i32 - dy, image.height);
                let sx = clampi(x as i32 - dx, image.width);
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    out
}

pub fn augment_image(image: &ImageTensor, rng: &mut Rng) -> ImageTensor {
    let mut img = if rng.random_bool(0.5) { hflip(image) } else { image.clone() };
    let gain: f32 = rng.random_range(0.9..=1.1);
    let dy = rng.random_range(-2..=2);
    let dx = rng.random_range(-2..=2);
    img = translate(&img, dy, dx);
    for v in &mut img.data {
        *v = (*v * gain).clamp(0.0, 1.0);
    }
    img
}

/// Random flip, brightness jitter and small translation; caption unchanged.
pub fn augment(pair: &ImageTextPair, seed: u64) -> ImageTextPair {
    let mut rng = seed::rng(seed, "augment");
    ImageTextPair {
        id: pair.id.clone(),
        image: augment_image(&pair.image, &mut rng),
        captions: pair.captions.clone(),
    }
}

/// `lambda * sum(theta^2)`.
pub fn l2_penalty(params: &[f64], lambda: f64) -> f64 {
    lambda * params.iter().map(|v| v * v).sum::<f64>()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grad` in place so its norm is at most `clip_norm`.
pub fn clip_gradient(grad: &mut [f64], clip_norm: f64) {
    let norm = l2_norm(grad);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grad {
            *g *= scale;
        }
    }
}

/// Clips each per-sample gradient, averages them and adds Gaussian noise
/// with per-coordinate std `noise_multiplier * clip_norm / batch`.
pub fn dp_sgd_step(per_sample: &[Vec<f64>], dp: &DpConfig, rng: &mut Rng) -> Vec<f64> {
    assert!(!per_sample.is_empty(), "need at least one per-sample gradient");
    let batch = per_sample.len() as f64;
    let dim = per_sample[0].len();
    let mut sum = vec![0.0; dim];
    let mut clipped = vec![0.0; dim];
    for g in per_sample {
        clipped.copy_from_slice(g);
        clip_gradient(&mut clipped, dp.clip_norm);
        for (s, c) in sum.iter_mut().zip(&clipped) {
            *s += c;
        }
    }
    let std = dp.noise_multiplier * dp.clip_norm / batch;
    let noise = (std > 0.0).then(|| Normal::new(0.0, std).expect("finite positive std"));
    for s in &mut sum {
        *s /= batch;
        if let Some(n) = &noise {
            *s += n.sample(rng);
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec, Family};

    fn sample_pair() -> ImageTextPair {
        generate_corpus(&CorpusSpec {
            family: Family::C,
            size: 20,
            seed: 0,
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn flip_is_involution() {
        let p = sample_pair();
        assert_eq!(hflip(&hflip(&p.image)), p.image);
        assert_ne!(hflip(&p.image), p.image);
    }

    #[test]
    fn augment_is_deterministic_and_bounded() {
        let p = sample_pair();
        let a = augment(&p, 11);
        assert_eq!(a, augment(&p, 11));
        assert_eq!(a.captions, p.captions);
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.image, augment(&p, 12).image);
    }

    #[test]
    fn l2_penalty_values() {
        assert_eq!(l2_penalty(&[1.0, -3.0], 0.0), 0.0);
        assert_eq!(l2_penalty(&[2.0], 0.5), 2.0);
        let theta = [0.3, -1.2, 2.0];
        let mut last = -1.0;
        for lambda in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let v = l2_penalty(&theta, lambda);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn clipping_halves_norm_two_gradient() {
        let dp = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            seed: 0,
        };
        let g = vec![vec![2.0, 0.0, 0.0]];
        let out = dp_sgd_step(&g, &dp, &mut seed::rng(0, "t"));
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn unclipped_noiseless_is_plain_mean() {
        let dp = DpConfig {
            clip_norm: 10.0,
            noise_multiplier: 0.0,
            seed: 0,
        };
        let g = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![0.5, 0.5]];
        let out = dp_sgd_step(&g, &dp, &mut seed::rng(0, "t"));
        let mean: Vec<f64> = (0..2).map(|j| g.iter().map(|v| v[j]).sum::<f64>() / 3.0).collect();
        assert_eq!(out, mean);
    }

    #[test]
    fn noise_std_matches_configuration() {
        let dp = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            seed: 3,
        };
        let batch = 4;
        let g = vec![vec![0.0; 2500]; batch];
        let mut rng = seed::rng(dp.seed, "noise");
        let mut draws = Vec::with_capacity(10_000);
        for _ in 0..4 {
            draws.extend(dp_sgd_step(&g, &dp, &mut rng));
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = dp.noise_multiplier * dp.clip_norm / batch as f64;
        assert!((std - target).abs() <= 0.2 * target, "std {std} vs {target}");
    }

    #[test]
    fn validation() {
        assert!(DpConfig {
            clip_norm: 0.0,
            noise_multiplier: 1.0,
            seed: 0
        }
        .validate()
        .is_err());
    }
}
