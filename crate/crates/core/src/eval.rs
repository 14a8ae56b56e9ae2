//! Attack evaluation with the detector's own clean-image detections as
//! ground truth: mAP at IoU 0.5, attack success rate, recall, input
//! transformation defenses and Cartesian sweeps.

use std::fmt::Write as _;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::creases::CreaseFieldConfig;
use crate::detector::{detect, Detection, Detector, DEFAULT_NMS_IOU};
use crate::eot::{sample_transform_with, EotConfig, SampledTransform};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::loss::PatchImage;
use crate::render::{render, BoundingBox, RenderConfig, Scene};
use crate::trainer::derived_rng;

pub const MATCH_IOU: f64 = 0.5;

/// Clean-scene detections of one detector, used as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub detector_name: String,
    pub per_image: Vec<Vec<BoundingBox>>,
}

impl GroundTruth {
    pub fn box_count(&self) -> usize {
        self.per_image.iter().map(Vec::len).sum()
    }
}

pub fn build_ground_truth(detector: &Detector, scenes: &[Scene]) -> Result<GroundTruth> {
    let per_image = scenes
        .iter()
        .map(|s| {
            Ok(detect(detector, &s.image, DEFAULT_NMS_IOU)?
                .into_iter()
                .map(|d| d.bbox)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(GroundTruth {
        detector_name: detector.name().to_string(),
        per_image,
    })
}

/// Greedy matching in descending score order across all images. Returns,
/// for each prediction in that order, its score and whether it is a true
/// positive.
fn match_predictions(gt: &[Vec<BoundingBox>], preds: &[Vec<(BoundingBox, f64)>], iou: f64) -> Vec<(f64, bool)> {
    let mut flat: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().map(move |(j, p)| (i, j, p.1)))
        .collect();
    flat.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    flat.into_iter()
        .map(|(i, j, score)| {
            let p = &preds[i][j].0;
            let best = gt
                .get(i)
                .into_iter()
                .flatten()
                .enumerate()
                .filter(|(k, _)| !used[i][*k])
                .map(|(k, g)| (k, g.iou(p)))
                .filter(|&(_, v)| v >= iou)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((k, _)) => {
                    used[i][k] = true;
                    (score, true)
                }
                None => (score, false),
            }
        })
        .collect()
}

/// All-point interpolated average precision in `[0,1]`. With no ground
/// truth, an empty prediction set scores 1 and any prediction scores 0.
pub fn average_precision(gt: &[Vec<BoundingBox>], preds: &[Vec<(BoundingBox, f64)>], iou: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    let matched = match_predictions(gt, preds, iou);
    if n_gt == 0 {
        return if matched.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let precision: Vec<(f64, bool)> = matched
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += hit as usize;
            (tp as f64 / (k + 1) as f64, hit)
        })
        .collect();
    // Precision envelope from the right; each true positive adds 1/n_gt of
    // recall at the envelope value.
    let mut best = 0.0f64;
    let mut sum = 0.0;
    for &(p, hit) in precision.iter().rev() {
        best = best.max(p);
        if hit {
            sum += best;
        }
    }
    sum / n_gt as f64
}

/// Fraction of ground-truth boxes matched by some prediction.
pub fn recall(gt: &[Vec<BoundingBox>], preds: &[Vec<(BoundingBox, f64)>], iou: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 1.0;
    }
    let tp = match_predictions(gt, preds, iou).iter().filter(|m| m.1).count();
    tp as f64 / n_gt as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Jpeg,
    GaussianNoise,
    MedianBlur,
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::Jpeg => "jpeg",
            DefenseKind::GaussianNoise => "gaussian_noise",
            DefenseKind::MedianBlur => "median_blur",
        }
    }

    /// Parameter grid of the defense table. Median-blur kernels 10 and 20
    /// are even in the table and run as 11 and 21.
    pub fn grid(&self) -> &'static [f64] {
        match self {
            DefenseKind::Jpeg => &[90.0, 70.0, 50.0, 30.0],
            DefenseKind::GaussianNoise => &[0.01, 0.02, 0.05, 0.1],
            DefenseKind::MedianBlur => &[5.0, 11.0, 15.0, 21.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub param: f64,
    /// Seed of the noise defense.
    #[serde(default)]
    pub seed: u64,
}

impl DefenseConfig {
    pub fn new(kind: DefenseKind, param: f64) -> Result<Self> {
        let d = Self { kind, param, seed: 0 };
        d.validate()?;
        Ok(d)
    }

    /// Maps the table's even median kernels (10, 20) to 11 and 21.
    pub fn from_table(kind: DefenseKind, param: f64) -> Result<Self> {
        let param = match (kind, param) {
            (DefenseKind::MedianBlur, p) if p == 10.0 || p == 20.0 => p + 1.0,
            (_, p) => p,
        };
        Self::new(kind, param)
    }

    pub fn all() -> Vec<DefenseConfig> {
        [DefenseKind::Jpeg, DefenseKind::GaussianNoise, DefenseKind::MedianBlur]
            .iter()
            .flat_map(|k| {
                k.grid().iter().map(move |&p| DefenseConfig {
                    kind: *k,
                    param: p,
                    seed: 0,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == DefenseKind::MedianBlur && self.param.fract() == 0.0 && (self.param as u64).is_multiple_of(2) {
            return Err(invalid(format!("median blur kernel must be odd, got {}", self.param)));
        }
        let noop = self.kind == DefenseKind::GaussianNoise && self.param == 0.0;
        if !noop && !self.kind.grid().contains(&self.param) {
            return Err(invalid(format!(
                "{} parameter {} not in grid {:?}",
                self.kind.name(),
                self.param,
                self.kind.grid()
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let note = match (self.kind, self.param) {
            (DefenseKind::MedianBlur, 11.0) => " (table 10)",
            (DefenseKind::MedianBlur, 21.0) => " (table 20)",
            _ => "",
        };
        format!("{}={}{}", self.kind.name(), self.param, note)
    }
}

pub fn jpeg_roundtrip(image: &Image, quality: u8) -> Result<Image> {
    let rgb = image.to_rgb8()?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

/// Square median filter with replicated borders.
pub fn median_blur(image: &Image, kernel: usize) -> Result<Image> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(invalid(format!("median blur kernel must be odd, got {kernel}")));
    }
    let (c, h, w) = image.shape();
    let r = (kernel / 2) as isize;
    let mut out = Image::new(c, h, w);
    let mut window = Vec::with_capacity(kernel * kernel);
    for ch in 0..c {
        let src = image.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(src[yy * w + xx]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
                dst[y * w + x] = *m;
            }
        }
    }
    Ok(out)
}

/// Applies `d` to a full image; `stream` selects an independent noise
/// stream (normally the image index).
pub fn apply_defense(image: &Image, d: &DefenseConfig, stream: u64) -> Result<Image> {
    d.validate()?;
    match d.kind {
        DefenseKind::Jpeg => jpeg_roundtrip(image, d.param as u8),
        DefenseKind::GaussianNoise => {
            if d.param == 0.0 {
                return Ok(image.clone());
            }
            let mut rng = derived_rng(d.seed, 0xdefe, stream, 0);
            let dist = Normal::new(0.0, d.param).map_err(|e| invalid(e.to_string()))?;
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        DefenseKind::MedianBlur => median_blur(image, d.param as usize),
    }
}

/// Transform distribution applied to the patch at evaluation time; one
/// draw per image from `(seed, image index)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalTransforms {
    pub eot: EotConfig,
    pub creases: CreaseFieldConfig,
    pub seed: u64,
}

impl Default for EvalTransforms {
    fn default() -> Self {
        Self::none()
    }
}

impl EvalTransforms {
    pub fn none() -> Self {
        Self {
            eot: EotConfig::identity(),
            creases: CreaseFieldConfig::disabled(),
            seed: 0,
        }
    }

    pub fn with_creases(mut self, creases: CreaseFieldConfig) -> Self {
        self.creases = creases;
        self
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.eot != EotConfig::identity() {
            let e = &self.eot;
            parts.push(format!(
                "eot(rot={},noise={},contrast={}..{},bright={},scale={}..{})",
                e.rotation_deg,
                e.noise_amp,
                e.contrast_range.0,
                e.contrast_range.1,
                e.brightness_amp,
                e.scale_jitter.0,
                e.scale_jitter.1
            ));
        }
        if !self.creases.is_disabled() {
            parts.push(format!(
                "creases({}..{})",
                self.creases.creases_min, self.creases.creases_max
            ));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn sample(&self, patch_dims: (usize, usize), image_index: usize) -> Result<SampledTransform> {
        let mut rng = derived_rng(self.seed, 0xe7a1, image_index as u64, 0);
        sample_transform_with(&self.eot, &self.creases, patch_dims, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub render: RenderConfig,
    pub transforms: EvalTransforms,
    pub nms_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            transforms: EvalTransforms::none(),
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector_name: String,
    pub map_50: f64,
    pub asr: f64,
    pub recall: f64,
    pub n_images: usize,
    pub transform_stack: String,
    pub defense: Option<(String, f64)>,
    /// Confidence threshold that recall (and the detections) are taken at.
    pub conf_threshold: f64,
    /// Patch scale, when a patch was rendered.
    pub scale: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "detector,scale,transform_stack,defense,defense_param,n_images,conf_threshold,map_50,asr,recall";

    pub fn csv_line(&self) -> String {
        let (dn, dp) = match &self.defense {
            Some((n, p)) => (n.clone(), p.to_string()),
            None => ("none".into(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.3},{:.3}",
            self.detector_name,
            self.scale.map_or("none".into(), |s| s.to_string()),
            self.transform_stack,
            dn,
            dp,
            self.n_images,
            self.conf_threshold,
            self.map_50,
            self.asr,
            self.recall
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Fixed-width text table of the reports.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.detector_name.clone(),
                r.scale.map_or("-".into(), |s| format!("{s}")),
                r.transform_stack.clone(),
                r.defense.as_ref().map_or("-".into(), |(n, p)| format!("{n} {p}")),
                format!("{:.2}", r.map_50),
                format!("{:.2}", r.asr),
                format!("{:.2}", r.recall),
            ]
        })
        .collect();
    let head = ["detector", "scale", "transforms", "defense", "mAP@0.5", "ASR", "recall"];
    let mut width: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "| {} |", parts.join(" | "));
    };
    line(head.to_vec(), &mut out);
    let sep: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", sep.join("-|-"));
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// The scene as the detector sees it: patch rendered on every labelled box
/// (when given), then the defense applied to the whole image.
pub fn prepare_scene(
    scene: &Scene,
    index: usize,
    patch: Option<&PatchImage>,
    settings: &EvalSettings,
    defense: Option<&DefenseConfig>,
) -> Result<Image> {
    let mut img = match patch {
        Some(p) => {
            let t = settings.transforms.sample((p.width(), p.height()), index)?;
            render(scene, p, &t, &settings.render)?.scene.image
        }
        None => scene.image.clone(),
    };
    if let Some(d) = defense {
        img = apply_defense(&img, d, index as u64)?;
    }
    Ok(img)
}

/// Report plus the per-image post-processed detections.
pub fn evaluate_detailed(
    detector: &Detector,
    gt: &GroundTruth,
    scenes: &[Scene],
    patch: Option<&PatchImage>,
    settings: &EvalSettings,
    defense: Option<&DefenseConfig>,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    if gt.detector_name != detector.name() {
        return Err(Error::DetectorMismatch {
            expected: gt.detector_name.clone(),
            actual: detector.name().to_string(),
        });
    }
    if gt.per_image.len() != scenes.len() {
        return Err(invalid(format!(
            "ground truth covers {} images, got {} scenes",
            gt.per_image.len(),
            scenes.len()
        )));
    }
    settings.render.validate()?;
    let person = detector.handle().person_class_index;
    let mut dets = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let img = prepare_scene(scene, i, patch, settings, defense)?;
        dets.push(detect(detector, &img, settings.nms_iou)?);
    }
    let preds: Vec<Vec<(BoundingBox, f64)>> = dets
        .iter()
        .map(|ds| ds.iter().map(|d| (d.bbox, d.score(person))).collect())
        .collect();
    let map_50 = 100.0 * average_precision(&gt.per_image, &preds, MATCH_IOU);
    let report = EvalReport {
        detector_name: detector.name().to_string(),
        map_50,
        asr: 100.0 - map_50,
        recall: 100.0 * recall(&gt.per_image, &preds, MATCH_IOU),
        n_images: scenes.len(),
        transform_stack: if patch.is_some() {
            settings.transforms.describe()
        } else {
            "clean".into()
        },
        defense: defense.map(|d| (d.label(), d.param)),
        conf_threshold: detector.handle().conf_threshold,
        scale: patch.map(|_| settings.render.scale),
    };
    Ok((report, dets))
}

pub fn evaluate_map(
    detector: &Detector,
    gt: &GroundTruth,
    scenes: &[Scene],
    patch: Option<&PatchImage>,
    settings: &EvalSettings,
    defense: Option<&DefenseConfig>,
) -> Result<EvalReport> {
    evaluate_detailed(detector, gt, scenes, patch, settings, defense).map(|(r, _)| r)
}

/// Axes of a sweep; an empty axis uses the base setting.
#[derive(Debug, Clone, Default)]
pub struct SweepAxes {
    pub scales: Vec<f64>,
    /// Crease field used when creases are on; each entry is one column.
    pub creases: Vec<Option<CreaseFieldConfig>>,
    pub defenses: Vec<Option<DefenseConfig>>,
}

/// One report per cell of detectors × scales × creases × defenses.
pub fn sweep(
    detectors: &[&Detector],
    scenes: &[Scene],
    patch: Option<&PatchImage>,
    base: &EvalSettings,
    axes: &SweepAxes,
) -> Result<Vec<EvalReport>> {
    fn or_base<T: Clone>(v: &[T], base: T) -> Vec<T> {
        if v.is_empty() {
            vec![base]
        } else {
            v.to_vec()
        }
    }
    let scales = or_base(&axes.scales, base.render.scale);
    let creases = or_base(
        &axes.creases,
        (!base.transforms.creases.is_disabled()).then_some(base.transforms.creases),
    );
    let defenses = or_base(&axes.defenses, None);
    let mut out = Vec::new();
    for det in detectors {
        let gt = build_ground_truth(det, scenes)?;
        for &scale in &scales {
            for cr in &creases {
                for d in &defenses {
                    let mut s = *base;
                    s.render.scale = scale;
                    s.transforms.creases = cr.unwrap_or_else(CreaseFieldConfig::disabled);
                    out.push(evaluate_map(det, &gt, scenes, patch, &s, d.as_ref())?);
                }
            }
        }
    }
    Ok(out)
}
