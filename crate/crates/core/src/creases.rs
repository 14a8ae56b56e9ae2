//! Non-rigid crease warps that model fabric wrinkles.
//!
//! A crease is an anchor point plus a displacement vector. Every pixel moves
//! along the vector, scaled by a multiplier that is 1 on the line through the
//! anchor along the vector and falls off with the squared perpendicular
//! distance, normalized by the patch diagonal. The warp is realized as an
//! inverse bilinear sampling so it is differentiable and leaves no holes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{BilinearMap, Image};
use crate::loss::PatchImage;

/// Largest absolute value of each crease vector component, in pixels.
pub const MAX_CREASE_SHIFT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crease {
    pub anchor: (f64, f64),
    pub vector: (f64, f64),
}

impl Crease {
    pub fn new(anchor: (f64, f64), vector: (f64, f64)) -> Self {
        Self { anchor, vector }
    }

    /// Checks the component bound, a non-zero vector, and (when `dims` is
    /// given as `(width, height)`) that the anchor lies inside the patch.
    pub fn validate(&self, dims: Option<(usize, usize)>) -> Result<()> {
        let (dx, dy) = self.vector;
        if !(dx.abs() <= MAX_CREASE_SHIFT && dy.abs() <= MAX_CREASE_SHIFT) {
            return Err(invalid(format!(
                "crease vector ({dx}, {dy}) exceeds ±{MAX_CREASE_SHIFT}"
            )));
        }
        if dx == 0.0 && dy == 0.0 {
            return Err(invalid("zero-length crease vector"));
        }
        if let Some((w, h)) = dims {
            let (x0, y0) = self.anchor;
            if !(x0 >= 0.0 && y0 >= 0.0 && x0 <= (w - 1) as f64 && y0 <= (h - 1) as f64) {
                return Err(invalid(format!("crease anchor ({x0}, {y0}) outside {w}x{h} patch")));
            }
        }
        Ok(())
    }

    /// Plain-text record `anchor_x anchor_y vector_x vector_y`.
    pub fn to_record(&self) -> String {
        format!(
            "{:?} {:?} {:?} {:?}",
            self.anchor.0, self.anchor.1, self.vector.0, self.vector.1
        )
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| invalid(format!("bad crease field {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(invalid(format!("crease record needs 4 fields, got {}", vals.len())));
        }
        let c = Crease::new((vals[0], vals[1]), (vals[2], vals[3]));
        c.validate(None)?;
        Ok(c)
    }
}

/// Writes a crease field as a reproducible text block: a `seed` line followed
/// by one crease record per line.
pub fn creases_to_text(seed: u64, creases: &[Crease]) -> String {
    let mut s = format!("seed {seed}\n");
    for c in creases {
        s.push_str(&c.to_record());
        s.push('\n');
    }
    s
}

pub fn creases_from_text(text: &str) -> Result<(u64, Vec<Crease>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| invalid("empty crease record"))?;
    let seed = head
        .strip_prefix("seed ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| invalid(format!("expected 'seed <n>' header, got {head:?}")))?;
    let creases = lines.map(Crease::from_record).collect::<Result<_>>()?;
    Ok((seed, creases))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreaseFieldConfig {
    pub creases_min: usize,
    pub creases_max: usize,
    pub rng_seed: u64,
}

impl Default for CreaseFieldConfig {
    fn default() -> Self {
        Self {
            creases_min: 1,
            creases_max: 5,
            rng_seed: 0,
        }
    }
}

impl CreaseFieldConfig {
    pub fn disabled() -> Self {
        Self {
            creases_min: 0,
            creases_max: 0,
            rng_seed: 0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.creases_max == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.creases_min > self.creases_max {
            return Err(invalid(format!(
                "creases_min {} > creases_max {}",
                self.creases_min, self.creases_max
            )));
        }
        Ok(())
    }
}

/// Displacement multiplier of `point` for `crease` on a patch of
/// `(width, height)`.
pub fn crease_multiplier(point: (f64, f64), crease: &Crease, patch_dims: (usize, usize)) -> Result<f64> {
    let (w, h) = patch_dims;
    if w == 0 || h == 0 {
        return Err(invalid("patch dimensions must be positive"));
    }
    let (vx, vy) = crease.vector;
    let vnorm2 = vx * vx + vy * vy;
    if vnorm2 == 0.0 {
        return Err(invalid("zero-length crease vector"));
    }
    let diag2 = (w * w + h * h) as f64;
    Ok(multiplier_unchecked(point, crease.anchor, crease.vector, vnorm2, diag2))
}

#[inline]
fn multiplier_unchecked(point: (f64, f64), anchor: (f64, f64), v: (f64, f64), vnorm2: f64, diag2: f64) -> f64 {
    let dx = point.0 - anchor.0;
    let dy = point.1 - anchor.1;
    let d2 = dx * dx + dy * dy;
    if d2 == 0.0 {
        return 1.0;
    }
    // sin²θ·|d|² = cross(d, v)² / |v|²
    let cross = dx * v.1 - dy * v.0;
    let perp2 = cross * cross / vnorm2;
    (1.0 - perp2 / diag2).clamp(0.0, 1.0)
}

/// Summed displacement of every pixel (row-major, `(dx, dy)`).
pub fn displacement_field(width: usize, height: usize, creases: &[Crease]) -> Result<Vec<(f64, f64)>> {
    let diag2 = (width * width + height * height) as f64;
    let mut field = vec![(0.0, 0.0); width * height];
    for c in creases {
        c.validate(Some((width, height)))?;
        let vnorm2 = c.vector.0 * c.vector.0 + c.vector.1 * c.vector.1;
        for y in 0..height {
            for x in 0..width {
                let m = multiplier_unchecked((x as f64, y as f64), c.anchor, c.vector, vnorm2, diag2);
                let d = &mut field[y * width + x];
                d.0 += c.vector.0 * m;
                d.1 += c.vector.1 * m;
            }
        }
    }
    Ok(field)
}

/// A crease warp ready to run forward and backward. `None` for an empty
/// crease list, which is an exact identity.
#[derive(Debug, Clone)]
pub struct CreaseWarp {
    map: Option<BilinearMap>,
}

impl CreaseWarp {
    pub fn new(width: usize, height: usize, creases: &[Crease]) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(invalid(format!("cannot warp a degenerate {width}x{height} patch")));
        }
        if creases.is_empty() {
            return Ok(Self { map: None });
        }
        let field = displacement_field(width, height, creases)?;
        let map = BilinearMap::from_fn(height, width, height, width, |r, c| {
            let (dx, dy) = field[r * width + c];
            (c as f64 - dx, r as f64 - dy)
        });
        Ok(Self { map: Some(map) })
    }

    pub fn apply(&self, img: &Image) -> Image {
        match &self.map {
            Some(m) => m.apply(img),
            None => img.clone(),
        }
    }

    pub fn backward(&self, grad: &Image) -> Image {
        match &self.map {
            Some(m) => m.backward(grad),
            None => grad.clone(),
        }
    }
}

/// Warps the patch by the summed crease displacement.
pub fn apply_creases(patch: &PatchImage, creases: &[Crease]) -> Result<PatchImage> {
    let warp = CreaseWarp::new(patch.width(), patch.height(), creases)?;
    PatchImage::new(warp.apply(patch.image()))
}

/// Draws a crease field using the config's own seed.
pub fn sample_crease_field(config: &CreaseFieldConfig, patch_dims: (usize, usize)) -> Result<Vec<Crease>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    sample_creases_with(config, patch_dims, &mut rng)
}

/// Draws a uniform crease count, then uniform anchors inside the patch and
/// uniform vector components in `[−5, 5]`.
pub fn sample_creases_with<R: Rng + ?Sized>(
    config: &CreaseFieldConfig,
    patch_dims: (usize, usize),
    rng: &mut R,
) -> Result<Vec<Crease>> {
    config.validate()?;
    let (w, h) = patch_dims;
    if w == 0 || h == 0 {
        return Err(invalid("patch dimensions must be positive"));
    }
    if config.creases_max == 0 {
        return Ok(Vec::new());
    }
    let count = rng.gen_range(config.creases_min..=config.creases_max);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let anchor = (rng.gen_range(0.0..=(w - 1) as f64), rng.gen_range(0.0..=(h - 1) as f64));
        let vector = (
            rng.gen_range(-MAX_CREASE_SHIFT..=MAX_CREASE_SHIFT),
            rng.gen_range(-MAX_CREASE_SHIFT..=MAX_CREASE_SHIFT),
        );
        if vector == (0.0, 0.0) {
            continue;
        }
        out.push(Crease { anchor, vector });
    }
    Ok(out)
}
