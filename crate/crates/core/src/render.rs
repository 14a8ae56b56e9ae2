//! Pasting transformed patches over person boxes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eot::{apply_transform_traced, SampledTransform, TransformTrace};
use crate::error::{invalid, Result};
use crate::image::{BilinearMap, Image};
use crate::loss::PatchImage;

/// Detector input resolution.
pub const INPUT_SIZE: usize = 416;

/// Axis-aligned box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self { cx, cy, w, h, class_id }
    }

    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: usize) -> Self {
        Self {
            cx: (x_min + x_max) / 2.0,
            cy: (y_min + y_max) / 2.0,
            w: x_max - x_min,
            h: y_max - y_min,
            class_id,
        }
    }

    /// `(x_min, y_min, x_max, y_max)` in normalized units.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Checks the label-file invariants: all values in `[0,1]`, positive size.
    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!("box {vals:?} has values outside [0,1]")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(invalid(format!("box {vals:?} has non-positive size")));
        }
        Ok(())
    }
}

/// One dataset image at detector resolution with its person boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
    pub source_path: String,
}

impl Scene {
    pub fn new(image: Image, boxes: Vec<BoundingBox>, source_path: impl Into<String>) -> Self {
        Self {
            image,
            boxes,
            source_path: source_path.into(),
        }
    }

    pub fn with_image(&self, image: Image) -> Self {
        Self {
            image,
            boxes: self.boxes.clone(),
            source_path: self.source_path.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Patch side as a fraction of the box pixel height.
    pub scale: f64,
    /// Shift of the patch center, as a fraction of the box height.
    pub vertical_offset: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            scale: 0.5,
            vertical_offset: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid(format!("render scale must be > 0, got {}", self.scale)));
        }
        if !self.vertical_offset.is_finite() {
            return Err(invalid("vertical_offset must be finite"));
        }
        Ok(())
    }
}

/// Where one patch copy landed, in scene pixels (top-left may be negative
/// when the square is clipped by the image border).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub box_index: usize,
    pub x0: i64,
    pub y0: i64,
    pub side: usize,
}

/// Result of rendering one scene.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub scene: Scene,
    pub placements: Vec<Placement>,
    /// Boxes whose patch would be smaller than 2 px.
    pub skipped: usize,
}

impl Rendered {
    /// Sidecar text listing the pasted squares, one per line:
    /// `box_index x_min y_min x_max y_max`.
    pub fn placements_text(&self) -> String {
        let mut s = String::new();
        for p in &self.placements {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                p.box_index,
                p.x0,
                p.y0,
                p.x0 + p.side as i64,
                p.y0 + p.side as i64
            );
        }
        s
    }
}

/// State needed to map a scene gradient back onto the patch pixels.
#[derive(Debug, Clone)]
pub struct RenderTrace {
    transform: TransformTrace,
    patch_dims: (usize, usize),
    scene_dims: (usize, usize),
    pastes: Vec<(Placement, BilinearMap)>,
    /// Index into `pastes` of the copy that last painted each scene pixel.
    owner: Vec<u32>,
}

const NO_OWNER: u32 = u32::MAX;

impl RenderTrace {
    /// Gradient w.r.t. the untransformed patch given the gradient w.r.t. the
    /// rendered scene image.
    pub fn backward(&self, grad_scene: &Image) -> Image {
        let (ph, pw) = self.patch_dims;
        let (sh, sw) = self.scene_dims;
        debug_assert_eq!(grad_scene.shape(), (3, sh, sw));
        let mut grad_t = Image::new(3, ph, pw);
        for (k, (pl, map)) in self.pastes.iter().enumerate() {
            let side = pl.side;
            let mut g_resized = Image::new(3, side, side);
            let mut any = false;
            for r in 0..side {
                let y = pl.y0 + r as i64;
                if y < 0 || y >= sh as i64 {
                    continue;
                }
                for c in 0..side {
                    let x = pl.x0 + c as i64;
                    if x < 0 || x >= sw as i64 {
                        continue;
                    }
                    let at = y as usize * sw + x as usize;
                    if self.owner[at] != k as u32 {
                        continue;
                    }
                    any = true;
                    for ch in 0..3 {
                        g_resized.set(ch, r, c, grad_scene.get(ch, y as usize, x as usize));
                    }
                }
            }
            if any {
                grad_t.add_assign(&map.backward(&g_resized));
            }
        }
        self.transform.backward(&grad_t)
    }
}

/// Square side in pixels for a box of normalized height `box_h`.
pub fn patch_side(box_h: f64, scene_h: usize, cfg: &RenderConfig, scale_mult: f64) -> usize {
    let side = cfg.scale * scale_mult * box_h * scene_h as f64;
    side.round().max(0.0) as usize
}

pub fn render(scene: &Scene, patch: &PatchImage, t: &SampledTransform, cfg: &RenderConfig) -> Result<Rendered> {
    render_traced(scene, patch, t, cfg).map(|(r, _)| r)
}

/// Transforms the patch once, then pastes a resized copy centered on every
/// box, in box order.
pub fn render_traced(
    scene: &Scene,
    patch: &PatchImage,
    t: &SampledTransform,
    cfg: &RenderConfig,
) -> Result<(Rendered, RenderTrace)> {
    cfg.validate()?;
    if scene.image.channels() != 3 {
        return Err(invalid("scene image must have 3 channels"));
    }
    let (transformed, ttrace) = apply_transform_traced(patch, t)?;
    let (sh, sw) = (scene.image.height(), scene.image.width());
    let mut image = scene.image.clone();
    let mut owner = vec![NO_OWNER; sh * sw];
    let mut pastes = Vec::new();
    let mut placements = Vec::new();
    let mut skipped = 0;
    for (bi, b) in scene.boxes.iter().enumerate() {
        let side = patch_side(b.h, sh, cfg, t.scale_mult);
        if side < 2 {
            skipped += 1;
            continue;
        }
        let cx = b.cx * sw as f64;
        let cy = (b.cy + cfg.vertical_offset * b.h) * sh as f64;
        let half = side as f64 / 2.0;
        let pl = Placement {
            box_index: bi,
            x0: (cx - half).round() as i64,
            y0: (cy - half).round() as i64,
            side,
        };
        let map = BilinearMap::resize(transformed.height(), transformed.width(), side, side);
        let resized = map.apply(transformed.image());
        let k = pastes.len() as u32;
        for r in 0..side {
            let y = pl.y0 + r as i64;
            if y < 0 || y >= sh as i64 {
                continue;
            }
            for c in 0..side {
                let x = pl.x0 + c as i64;
                if x < 0 || x >= sw as i64 {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                owner[y * sw + x] = k;
                for ch in 0..3 {
                    image.set(ch, y, x, resized.get(ch, r, c));
                }
            }
        }
        placements.push(pl);
        pastes.push((pl, map));
    }
    let trace = RenderTrace {
        transform: ttrace,
        patch_dims: (patch.height(), patch.width()),
        scene_dims: (sh, sw),
        pastes,
        owner,
    };
    Ok((
        Rendered {
            scene: scene.with_image(image),
            placements,
            skipped,
        },
        trace,
    ))
}
