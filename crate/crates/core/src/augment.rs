//! Seeded spatial and photometric augmentation of patch/mask pairs.
//!
//! Every draw comes from a ChaCha stream keyed by `(seed, patient, lesion,
//! slice, epoch)`, and each candidate transform reads its own sub-stream, so
//! results do not depend on batch order, worker count, or on which other
//! transforms were drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Grid2, RgbImage};
use crate::preprocess::RgbPatch;
use crate::resample::{crop, crop_rgb, resize_bilinear, resize_nearest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("scale {scale} leaves an empty crop window")]
    DegenerateCrop { scale: f64 },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Zoom factors for the centered scale-crop.
    pub scales: Vec<f64>,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Rotation angles in degrees; multiples of 90.
    pub rotations: Vec<u32>,
    pub brightness_range: [f64; 2],
    pub contrast_range: [f64; 2],
    /// Noise standard deviation on the 0-255 scale.
    pub noise_sigma: f64,
    pub probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            scales: vec![1.25, 1.5, 1.75, 2.0],
            flip_h: true,
            flip_v: true,
            rotations: vec![90, 180, 270],
            brightness_range: [0.7, 1.3],
            contrast_range: [0.8, 1.2],
            noise_sigma: 5.0,
            probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidPolicy(msg));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        for (name, [lo, hi]) in [
            ("brightness", self.brightness_range),
            ("contrast", self.contrast_range),
        ] {
            if !(lo <= hi) || lo < 0.0 {
                return bad(format!("{name} range [{lo}, {hi}] is not well ordered"));
            }
        }
        if let Some(s) = self.scales.iter().find(|&&s| !(s >= 1.0)) {
            return bad(format!("scale {s} below 1"));
        }
        if let Some(r) = self.rotations.iter().find(|&&r| r % 90 != 0) {
            return bad(format!("rotation {r} is not a multiple of 90"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Identifies one augmentation draw.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentKey {
    pub seed: u64,
    pub patient_id: String,
    pub lesion_label: u16,
    pub z: usize,
    pub epoch: u64,
}

impl AugmentKey {
    fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.patient_id.len() as u64).to_le_bytes());
        h.update(self.patient_id.as_bytes());
        h.update(self.lesion_label.to_le_bytes());
        h.update((self.z as u64).to_le_bytes());
        h.update(self.epoch.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    ScaleCrop { scale: f64 },
    FlipHorizontal,
    FlipVertical,
    /// Counter-clockwise.
    Rotate { degrees: u32 },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    /// `sigma` in `[0, 1]` intensity units.
    GaussianNoise { sigma: f64, seed: u64 },
}

/// Candidate slots in application order; the slot number selects the
/// sub-stream.
const SLOTS: usize = 7;

/// Draws the transform list for `key`: each enabled candidate is included
/// independently with the policy's probability.
pub fn draw_transforms(policy: &AugmentPolicy, key: &AugmentKey) -> Vec<Transform> {
    let base = key.rng();
    let mut out = Vec::new();
    for slot in 0..SLOTS {
        let mut rng = base.clone();
        rng.set_stream(slot as u64);
        if rng.random::<f64>() >= policy.probability {
            continue;
        }
        let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| lo + (hi - lo) * rng.random::<f64>();
        let t = match slot {
            0 if !policy.scales.is_empty() => Transform::ScaleCrop {
                scale: policy.scales[rng.random_range(0..policy.scales.len())],
            },
            1 if policy.flip_h => Transform::FlipHorizontal,
            2 if policy.flip_v => Transform::FlipVertical,
            3 if !policy.rotations.is_empty() => Transform::Rotate {
                degrees: policy.rotations[rng.random_range(0..policy.rotations.len())],
            },
            4 => Transform::Brightness {
                factor: uniform(&mut rng, policy.brightness_range),
            },
            5 => Transform::Contrast {
                factor: uniform(&mut rng, policy.contrast_range),
            },
            6 if policy.noise_sigma > 0.0 => Transform::GaussianNoise {
                sigma: policy.noise_sigma / 255.0,
                seed: rng.random(),
            },
            _ => continue,
        };
        out.push(t);
    }
    out
}

fn map_planes<F>(patch: &RgbPatch, height: usize, width: usize, f: F) -> RgbPatch
where
    F: Fn(usize, usize) -> (usize, usize),
{
    let mut image = RgbImage::zeros(height, width);
    for c in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = f(y, x);
                image.set(c, y, x, patch.image.get(c, sy, sx));
            }
        }
    }
    let remap = |g: &Grid2<_>| Grid2::from_fn(height, width, |y, x| {
        let (sy, sx) = f(y, x);
        g.get(sy, sx)
    });
    RgbPatch {
        image,
        mask: remap(&patch.mask),
        malignant: patch.malignant.as_ref().map(|m| {
            Grid2::from_fn(height, width, |y, x| {
                let (sy, sx) = f(y, x);
                m.get(sy, sx)
            })
        }),
        provenance: patch.provenance.clone(),
    }
}

fn rotate_ccw(patch: &RgbPatch, quarter_turns: u32) -> RgbPatch {
    let (h, w) = patch.image.shape();
    match quarter_turns % 4 {
        0 => patch.clone(),
        1 => map_planes(patch, w, h, |y, x| (x, w - 1 - y)),
        2 => map_planes(patch, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => map_planes(patch, w, h, |y, x| (h - 1 - x, y)),
    }
}

fn scale_crop(patch: &RgbPatch, scale: f64) -> Result<RgbPatch, AugmentError> {
    let (h, w) = patch.image.shape();
    let ch = (h as f64 / scale).round() as usize;
    let cw = (w as f64 / scale).round() as usize;
    if ch == 0 || cw == 0 {
        return Err(AugmentError::DegenerateCrop { scale });
    }
    let y0 = ((h - ch.min(h)) / 2) as i64;
    let x0 = ((w - cw.min(w)) / 2) as i64;
    Ok(RgbPatch {
        image: resize_bilinear(&crop_rgb(&patch.image, y0, x0, ch, cw), h, w),
        mask: resize_nearest(&crop(&patch.mask, y0, x0, ch, cw), h, w),
        malignant: patch
            .malignant
            .as_ref()
            .map(|m| resize_nearest(&crop(m, y0, x0, ch, cw), h, w)),
        provenance: patch.provenance.clone(),
    })
}

/// Applies `transforms` in order. Spatial transforms move image and masks
/// together; photometric ones touch the image only. The image is clamped
/// to `[0, 1]` at the end.
pub fn apply(patch: &RgbPatch, transforms: &[Transform]) -> Result<RgbPatch, AugmentError> {
    let mut out = patch.clone();
    for t in transforms {
        match *t {
            Transform::ScaleCrop { scale } => out = scale_crop(&out, scale)?,
            Transform::FlipHorizontal => {
                let (h, w) = out.image.shape();
                out = map_planes(&out, h, w, |y, x| (y, w - 1 - x));
            }
            Transform::FlipVertical => {
                let (h, w) = out.image.shape();
                out = map_planes(&out, h, w, |y, x| (h - 1 - y, x));
            }
            Transform::Rotate { degrees } => out = rotate_ccw(&out, degrees / 90),
            Transform::Brightness { factor } => {
                let f = factor as f32;
                out.image.planar_mut().iter_mut().for_each(|v| *v *= f);
            }
            Transform::Contrast { factor } => {
                let f = factor as f32;
                for c in 0..3 {
                    let ch = out.image.channel_mut(c);
                    let mean = (ch.iter().map(|&v| f64::from(v)).sum::<f64>() / ch.len() as f64) as f32;
                    ch.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
                }
            }
            Transform::GaussianNoise { sigma, seed } => {
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| AugmentError::InvalidPolicy(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for v in out.image.planar_mut() {
                    *v += normal.sample(&mut rng) as f32;
                }
            }
        }
    }
    out.image
        .planar_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Augments every patch with a key derived from its provenance.
pub fn augment_batch(
    patches: &[RgbPatch],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: u64,
    jobs: usize,
) -> Result<Vec<RgbPatch>, AugmentError> {
    policy.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| AugmentError::Pool(e.to_string()))?;
    pool.install(|| {
        patches
            .par_iter()
            .map(|p| {
                let key = AugmentKey {
                    seed,
                    patient_id: p.provenance.patient_id.clone(),
                    lesion_label: p.provenance.lesion_label,
                    z: p.provenance.z,
                    epoch,
                };
                apply(p, &draw_transforms(policy, &key))
            })
            .collect()
    })
}
