//! The patch and guide types and the three terms of the attack objective:
//! detection, similarity to the guide image, and total variation.
//!
//! Each term comes with an analytic gradient. The trainer sums the weighted
//! gradients; nothing here keeps a tape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{invalid, Error, Result};
use crate::image::{shape_str, Image};

/// Smoothing constant inside the TV square root.
pub const TV_EPSILON: f64 = 1e-8;

/// The optimized adversarial patch: a `3 × H × W` image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    image: Image,
    pub requires_grad: bool,
}

impl PatchImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape {
                expected: "3 channels".into(),
                actual: shape_str(image.shape()),
            });
        }
        if image.height() == 0 || image.width() == 0 {
            return Err(invalid("patch must be non-empty"));
        }
        Ok(Self {
            image,
            requires_grad: true,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            image: Image::filled(3, height, width, value),
            requires_grad: true,
        }
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn image_mut(&mut self) -> &mut Image {
        &mut self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Projects every channel value back into `[0,1]`.
    pub fn clamp(&mut self) {
        self.image.clamp_unit();
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::new(Image::load_png(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.image.save_png(path)
    }
}

/// The benign image the patch is steered towards.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideImage {
    image: Image,
}

impl GuideImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape {
                expected: "3 channels".into(),
                actual: shape_str(image.shape()),
            });
        }
        Ok(Self { image })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::new(Image::load_png(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.image.save_png(path)
    }
}

/// Weights of the detection, similarity and TV terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 4.0,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_sim: f64,
    pub l_tv: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn combine(weights: &LossWeights, l_det: f64, l_sim: f64, l_tv: f64) -> Self {
        Self {
            l_det,
            l_sim,
            l_tv,
            l_total: weights.alpha * l_det + weights.beta * l_sim + weights.gamma * l_tv,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_det", self.l_det),
            ("l_sim", self.l_sim),
            ("l_tv", self.l_tv),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Squared mean absolute difference between patch and guide.
pub fn similarity_loss(patch: &PatchImage, guide: &GuideImage) -> Result<f64> {
    Ok(similarity_loss_grad(patch, guide)?.0)
}

pub fn similarity_loss_grad(patch: &PatchImage, guide: &GuideImage) -> Result<(f64, Image)> {
    let p = patch.image();
    let g = guide.image();
    p.ensure_shape(g)?;
    let n = p.len() as f64;
    let mean_abs = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    // d/dP (mean|P-N|)^2 = 2·mean·sign(P-N)/n
    let k = 2.0 * mean_abs / n;
    let grad = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                k
            } else if d < 0.0 {
                -k
            } else {
                0.0
            }
        })
        .collect();
    let grad = Image::from_vec(p.channels(), p.height(), p.width(), grad)?;
    Ok((mean_abs * mean_abs, grad))
}

/// Isotropic total variation with forward differences, summed over channels.
///
/// Each term is `sqrt(dy² + dx² + ε) − sqrt(ε)`, so a constant patch scores
/// exactly zero while the gradient stays defined at zero difference.
pub fn tv_loss(patch: &PatchImage) -> Result<f64> {
    tv_image(patch.image(), false).map(|(v, _)| v)
}

pub fn tv_loss_grad(patch: &PatchImage) -> Result<(f64, Image)> {
    tv_image(patch.image(), true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn tv_image(img: &Image, with_grad: bool) -> Result<(f64, Option<Image>)> {
    let (ch, h, w) = img.shape();
    if h < 2 || w < 2 {
        return Err(invalid(format!("tv loss needs at least 2x2 pixels, got {h}x{w}")));
    }
    let base = TV_EPSILON.sqrt();
    let mut total = 0.0;
    let mut grad = with_grad.then(|| Image::new(ch, h, w));
    for c in 0..ch {
        let p = img.plane(c);
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let at = i * w + j;
                let dy = p[at + w] - p[at];
                let dx = p[at + 1] - p[at];
                let r = (dy * dy + dx * dx + TV_EPSILON).sqrt();
                total += r - base;
                if let Some(g) = grad.as_mut() {
                    let gp = g.plane_mut(c);
                    gp[at + w] += dy / r;
                    gp[at + 1] += dx / r;
                    gp[at] -= (dx + dy) / r;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Per-detection partial derivatives of the detection loss:
/// `(∂L/∂objectness, ∂L/∂person_prob)` for every selected detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLossGrad {
    pub per_image: Vec<Vec<(f64, f64)>>,
}

/// Mean over images of the mean `objectness × person-probability` of the
/// selected detections. Images with no selected detections contribute 0.
pub fn detection_loss(detections_per_image: &[Vec<Detection>], person_class: usize) -> Result<f64> {
    detection_loss_grad(detections_per_image, person_class).map(|(v, _)| v)
}

pub fn detection_loss_grad(
    detections_per_image: &[Vec<Detection>],
    person_class: usize,
) -> Result<(f64, DetectionLossGrad)> {
    if detections_per_image.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = detections_per_image.len() as f64;
    let mut total = 0.0;
    let mut per_image = Vec::with_capacity(detections_per_image.len());
    for dets in detections_per_image {
        let mut grads = Vec::with_capacity(dets.len());
        if !dets.is_empty() {
            let m = dets.len() as f64;
            let mut sum = 0.0;
            for d in dets {
                let cls = d.class_prob(person_class).ok_or_else(|| {
                    invalid(format!(
                        "person class {person_class} out of range for {} class scores",
                        d.class_probs.len()
                    ))
                })?;
                sum += d.objectness * cls;
                grads.push((cls / (n * m), d.objectness / (n * m)));
            }
            total += sum / m;
        }
        per_image.push(grads);
    }
    Ok((total / n, DetectionLossGrad { per_image }))
}

/// Evaluates all three terms and their weighted sum.
pub fn total_loss(
    patch: &PatchImage,
    guide: &GuideImage,
    detections_per_image: &[Vec<Detection>],
    person_class: usize,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let l_det = detection_loss(detections_per_image, person_class)?;
    let l_sim = similarity_loss(patch, guide)?;
    let l_tv = tv_loss(patch)?;
    Ok(LossBreakdown::combine(weights, l_det, l_sim, l_tv))
}
