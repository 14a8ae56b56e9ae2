//! Image/label directory ingestion. Labels are one `class cx cy w h` line
//! per box in normalized coordinates; images are letterboxed to the
//! detector input with 0.5 gray padding and their boxes remapped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use advpatch_core::image::BilinearMap;
use advpatch_core::{BoundingBox, Image, Scene};

use crate::error::{CliError, CliResult};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Largest fraction of unreadable images tolerated before ingestion aborts.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

pub const PAD_VALUE: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    /// Image path and its label file, if one exists.
    pub entries: Vec<(PathBuf, Option<PathBuf>)>,
}

fn files_by_stem(dir: &Path, exts: &[&str]) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for entry in rd {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str());
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if exts.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs images with label files by file stem, sorted by stem.
pub fn index_dataset(images_dir: &Path, labels_dir: &Path) -> CliResult<DatasetIndex> {
    let images = files_by_stem(images_dir, IMAGE_EXTENSIONS)?;
    let labels = files_by_stem(labels_dir, &["txt"])?;
    Ok(DatasetIndex {
        entries: images
            .into_iter()
            .map(|(stem, img)| (img, labels.get(&stem).cloned()))
            .collect(),
    })
}

pub fn parse_labels(text: &str, path: &Path) -> CliResult<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |why: &str| CliError::Data(format!("{}:{}: {why}: {line:?}", path.display(), i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err("expected 5 fields `class cx cy w h`"));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err("class id is not a non-negative integer"))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err("coordinate is not a number"))?;
        }
        let b = BoundingBox::new(v[0], v[1], v[2], v[3], class);
        b.validate().map_err(|e| err(&e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn format_labels(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

/// Geometry of an aspect-preserving resize into a `size × size` canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub size: usize,
    pub src_w: usize,
    pub src_h: usize,
    pub new_w: usize,
    pub new_h: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, size: usize) -> Self {
        let s = size as f64 / src_w.max(src_h) as f64;
        let new_w = ((src_w as f64 * s).round() as usize).clamp(1, size);
        let new_h = ((src_h as f64 * s).round() as usize).clamp(1, size);
        Self {
            size,
            src_w,
            src_h,
            new_w,
            new_h,
            pad_x: (size - new_w) / 2,
            pad_y: (size - new_h) / 2,
        }
    }

    /// Maps a box normalized to the source image into canvas-normalized
    /// coordinates.
    pub fn map_box(&self, b: &BoundingBox) -> BoundingBox {
        let k = self.size as f64;
        BoundingBox::new(
            (b.cx * self.new_w as f64 + self.pad_x as f64) / k,
            (b.cy * self.new_h as f64 + self.pad_y as f64) / k,
            b.w * self.new_w as f64 / k,
            b.h * self.new_h as f64 / k,
            b.class_id,
        )
    }

    pub fn apply(&self, img: &Image) -> Image {
        let resized = BilinearMap::resize(self.src_h, self.src_w, self.new_h, self.new_w).apply(img);
        let mut out = Image::filled(3, self.size, self.size, PAD_VALUE);
        for c in 0..3 {
            for y in 0..self.new_h {
                for x in 0..self.new_w {
                    out.set(c, y + self.pad_y, x + self.pad_x, resized.get(c, y, x));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub scenes: Vec<Scene>,
    pub skipped: Vec<PathBuf>,
}

/// Loads every indexed image, letterboxed to `size`. Only boxes whose class
/// equals `person_label` are kept.
pub fn load_scenes(index: &DatasetIndex, size: usize, person_label: usize) -> CliResult<LoadedDataset> {
    let mut scenes = Vec::with_capacity(index.entries.len());
    let mut skipped = Vec::new();
    for (img_path, label_path) in &index.entries {
        let boxes = match label_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                parse_labels(&text, p)?
            }
            None => Vec::new(),
        };
        let img = match image::open(img_path) {
            Ok(i) => Image::from_rgb8(&i.to_rgb8()),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", img_path.display());
                skipped.push(img_path.clone());
                continue;
            }
        };
        let lb = Letterbox::new(img.width(), img.height(), size);
        let boxes = boxes
            .iter()
            .filter(|b| b.class_id == person_label)
            .map(|b| lb.map_box(b))
            .collect();
        scenes.push(Scene::new(lb.apply(&img), boxes, img_path.display().to_string()));
    }
    let total = index.entries.len();
    if total > 0 && skipped.len() as f64 > MAX_SKIP_FRACTION * total as f64 {
        return Err(CliError::Data(format!(
            "{} of {total} images unreadable (limit {:.0}%)",
            skipped.len(),
            MAX_SKIP_FRACTION * 100.0
        )));
    }
    Ok(LoadedDataset { scenes, skipped })
}

pub fn ingest_dataset(
    images_dir: &Path,
    labels_dir: &Path,
    size: usize,
    person_label: usize,
) -> CliResult<LoadedDataset> {
    load_scenes(&index_dataset(images_dir, labels_dir)?, size, person_label)
}

/// Writes scenes as `images/NNNN.png` plus `labels/NNNN.txt`.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> CliResult<()> {
    let (img_dir, lbl_dir) = (dir.join("images"), dir.join("labels"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&lbl_dir)?;
    for (i, s) in scenes.iter().enumerate() {
        s.image.save_png(&img_dir.join(format!("{i:04}.png")))?;
        fs::write(lbl_dir.join(format!("{i:04}.txt")), format_labels(&s.boxes))?;
    }
    Ok(())
}
