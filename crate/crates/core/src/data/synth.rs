//! Procedural tumour-like slices: a smooth textured background with a few
//! bright elliptical blobs whose boundaries are sinusoidally warped.
//!
//! Sample `i` is drawn from its own PCG32 stream, `Pcg32::new(seed, i)`, so
//! any subset of a dataset can be regenerated independently. Per sample the
//! draws are, in order: background level and three texture waves, the
//! empty-sample coin, the blob count, then per blob its radii, rotation,
//! warp frequency/phase/amplitude, centre and intensity, and finally one
//! Gaussian noise value per pixel in row-major order.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, SliceSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Semi-axis range as a fraction of the height.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Mean intensity offset of a blob over the background.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Largest relative boundary warp; the boundary radius varies within `1 ± warp`.
    pub warp: f64,
    pub p_empty: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 0.08,
            radius_max: 0.2,
            contrast: 0.5,
            noise_sigma: 0.05,
            warp: 0.15,
            p_empty: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad("need 1 <= blobs_min <= blobs_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < 0.5) {
            return bad("need 0 < radius_min <= radius_max < 0.5");
        }
        if !(0.0..1.0).contains(&self.warp) {
            return bad("warp must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.p_empty) {
            return bad("p_empty must be in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite() && self.contrast.is_finite()) {
            return bad("noise_sigma must be non-negative and contrast finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    freq: f64,
    phase: f64,
    amp: f64,
    intensity: f64,
}

impl Blob {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let rho = u.hypot(v);
        rho <= 1.0 + self.amp * (self.freq * v.atan2(u) + self.phase).sin()
    }
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn gen_sample(cfg: &SynthConfig, index: usize) -> SliceSample {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = Pcg32::new(cfg.seed, index as u64);

    let level = rng.random_range(0.2..0.4);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let amp = rng.random_range(0.02..0.08);
            let freq = rng.random_range(0.5..2.5) * 2.0 * PI / h.max(w) as f64;
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            [amp, freq, dir, phase]
        })
        .collect();

    let empty = rng.random::<f64>() < cfg.p_empty;
    let n_blobs = if empty { 0 } else { rng.random_range(cfg.blobs_min..=cfg.blobs_max) };
    let side = h as f64;
    let reach = cfg.radius_max * side * (1.0 + cfg.warp) + 1.0;
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let rx = rng.random_range(cfg.radius_min..=cfg.radius_max) * side;
            let ry = rng.random_range(cfg.radius_min..=cfg.radius_max) * side;
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(2..=5) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.0..=cfg.warp);
            let centre = |rng: &mut Pcg32, len: usize| {
                let len = len as f64;
                if 2.0 * reach < len {
                    rng.random_range(reach..len - reach)
                } else {
                    rng.random::<f64>();
                    len / 2.0
                }
            };
            let cx = centre(&mut rng, w);
            let cy = centre(&mut rng, h);
            let intensity = cfg.contrast * rng.random_range(0.8..1.2);
            Blob {
                cx,
                cy,
                rx,
                ry,
                cos: theta.cos(),
                sin: theta.sin(),
                freq,
                phase,
                amp,
                intensity,
            }
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut raw = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = level;
            for &[amp, freq, dir, phase] in &waves {
                v += amp * (freq * (px * dir.cos() + py * dir.sin()) + phase).sin();
            }
            let hit = blobs.iter().find(|b| b.contains(px, py));
            if let Some(b) = hit {
                v += b.intensity;
            }
            v += noise.sample(&mut rng);
            raw.push(v);
            mask.push(u8::from(hit.is_some()));
        }
    }
    let image = crate::data::nifti::normalize_plane(&raw, crate::data::Normalization::MinMax);
    SliceSample::new(format!("synth_{index:05}"), Modality::Synth, h, w, image, mask).expect("generator output is well formed")
}

pub fn gen_synthetic(cfg: &SynthConfig, n: usize) -> Result<Vec<SliceSample>> {
    cfg.validate()?;
    Ok((0..n).map(|i| gen_sample(cfg, i)).collect())
}
