//! Expectation-over-transformation sampling: random rotation, scale jitter,
//! per-pixel noise, contrast and brightness, composed with a crease field.
//!
//! [`apply_transform`] runs creases, then rotation about the patch center,
//! then the pixel-wise appearance op `clamp(contrast·p + brightness + noise)`.
//! Scale jitter is carried along for the renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::creases::{sample_creases_with, Crease, CreaseFieldConfig, CreaseWarp};
use crate::error::{invalid, Result};
use crate::image::{BilinearMap, Image};
use crate::loss::PatchImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EotConfig {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub noise_amp: f64,
    pub contrast_range: (f64, f64),
    pub brightness_amp: f64,
    pub scale_jitter: (f64, f64),
    pub rng_seed: u64,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 20.0,
            noise_amp: 0.1,
            contrast_range: (0.8, 1.2),
            brightness_amp: 0.1,
            scale_jitter: (0.9, 1.1),
            rng_seed: 0,
        }
    }
}

impl EotConfig {
    /// A config whose every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            noise_amp: 0.0,
            contrast_range: (1.0, 1.0),
            brightness_amp: 0.0,
            scale_jitter: (1.0, 1.0),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("rotation_deg", self.rotation_deg),
            ("noise_amp", self.noise_amp),
            ("brightness_amp", self.brightness_amp),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, (lo, hi)) in [
            ("contrast_range", self.contrast_range),
            ("scale_jitter", self.scale_jitter),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(invalid(format!("{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// One draw from the transformation distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTransform {
    pub angle: f64,
    pub scale_mult: f64,
    /// Per-pixel additive noise, same shape as the patch; `None` means zero.
    pub noise: Option<Image>,
    pub contrast: f64,
    pub brightness: f64,
    pub creases: Vec<Crease>,
}

impl SampledTransform {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            scale_mult: 1.0,
            noise: None,
            contrast: 1.0,
            brightness: 0.0,
            creases: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0
            && self.scale_mult == 1.0
            && self.contrast == 1.0
            && self.brightness == 0.0
            && self.creases.is_empty()
            && self.noise.as_ref().is_none_or(|n| n.data().iter().all(|&v| v == 0.0))
    }
}

/// Draws a transform from the seeds stored in the two configs.
pub fn sample_transform(
    config: &EotConfig,
    crease_config: &CreaseFieldConfig,
    patch_dims: (usize, usize),
) -> Result<SampledTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ crease_config.rng_seed.rotate_left(32));
    sample_transform_with(config, crease_config, patch_dims, &mut rng)
}

/// Draws every field uniformly within its bounds. `patch_dims` is
/// `(width, height)`.
pub fn sample_transform_with<R: Rng + ?Sized>(
    config: &EotConfig,
    crease_config: &CreaseFieldConfig,
    patch_dims: (usize, usize),
    rng: &mut R,
) -> Result<SampledTransform> {
    config.validate()?;
    let uniform = |rng: &mut R, lo: f64, hi: f64| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let angle = uniform(rng, -config.rotation_deg, config.rotation_deg);
    let scale_mult = uniform(rng, config.scale_jitter.0, config.scale_jitter.1);
    let contrast = uniform(rng, config.contrast_range.0, config.contrast_range.1);
    let brightness = uniform(rng, -config.brightness_amp, config.brightness_amp);
    let (w, h) = patch_dims;
    let noise = (config.noise_amp > 0.0).then(|| {
        let a = config.noise_amp;
        Image::from_fn(3, h, w, |_, _, _| rng.gen_range(-a..=a))
    });
    let creases = sample_creases_with(crease_config, patch_dims, rng)?;
    Ok(SampledTransform {
        angle,
        scale_mult,
        noise,
        contrast,
        brightness,
        creases,
    })
}

/// Rotation of an `h × w` plane about its center by `angle_deg`
/// (counter-clockwise as displayed).
pub fn rotation_map(h: usize, w: usize, angle_deg: f64) -> BilinearMap {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    BilinearMap::from_fn(h, w, h, w, |r, col| {
        // y grows downwards, so a displayed CCW turn maps output back to input
        // through the transpose of the y-up rotation matrix.
        let x = col as f64 - cx;
        let y = cy - r as f64;
        let sx = c * x + s * y;
        let sy = -s * x + c * y;
        (sx + cx, cy - sy)
    })
}

/// Everything needed to push a gradient back through [`apply_transform`].
#[derive(Debug, Clone)]
pub struct TransformTrace {
    warp: CreaseWarp,
    rotation: Option<BilinearMap>,
    contrast: f64,
    /// 1 where the appearance clamp was inactive.
    pass: Vec<bool>,
}

impl TransformTrace {
    pub fn backward(&self, grad_out: &Image) -> Image {
        let mut g = grad_out.clone();
        for (v, &keep) in g.data_mut().iter_mut().zip(&self.pass) {
            *v = if keep { *v * self.contrast } else { 0.0 };
        }
        let g = match &self.rotation {
            Some(r) => r.backward(&g),
            None => g,
        };
        self.warp.backward(&g)
    }
}

pub fn apply_transform(patch: &PatchImage, t: &SampledTransform) -> Result<PatchImage> {
    apply_transform_traced(patch, t).map(|(p, _)| p)
}

pub fn apply_transform_traced(patch: &PatchImage, t: &SampledTransform) -> Result<(PatchImage, TransformTrace)> {
    let (h, w) = (patch.height(), patch.width());
    if let Some(n) = &t.noise {
        if n.shape() != (3, h, w) {
            return Err(invalid(format!(
                "noise field {:?} does not match patch 3x{h}x{w}",
                n.shape()
            )));
        }
    }
    let warp = CreaseWarp::new(w, h, &t.creases)?;
    let warped = warp.apply(patch.image());
    let rotation = (t.angle != 0.0).then(|| rotation_map(h, w, t.angle));
    let mut out = match &rotation {
        Some(r) => r.apply(&warped),
        None => warped,
    };
    let mut pass = vec![true; out.len()];
    let noise = t.noise.as_ref().map(|n| n.data());
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let pre = t.contrast * *v + t.brightness + noise.map_or(0.0, |n| n[i]);
        pass[i] = (0.0..=1.0).contains(&pre);
        *v = pre.clamp(0.0, 1.0);
    }
    let trace = TransformTrace {
        warp,
        rotation,
        contrast: t.contrast,
        pass,
    };
    Ok((PatchImage::new(out)?, trace))
}
