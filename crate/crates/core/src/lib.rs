//! Adversarial patch optimization against one-stage person detectors:
//! differentiable crease warps and appearance transforms, patch rendering,
//! a small darknet-compatible detector engine, the attack loop and mAP/ASR
//! evaluation under input-transformation defenses.

pub mod creases;
pub mod detector;
pub mod eot;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod optim;
pub mod render;
pub mod synthetic;
pub mod trainer;

pub use creases::{apply_creases, crease_multiplier, sample_crease_field, Crease, CreaseFieldConfig};
pub use detector::{detect, select_attack_targets, Detection, Detector, DetectorHandle};
pub use eot::{apply_transform, sample_transform, EotConfig, SampledTransform};
pub use error::{Error, Result};
pub use eval::{apply_defense, build_ground_truth, evaluate_map, sweep, DefenseConfig, EvalReport};
pub use image::Image;
pub use loss::{
    detection_loss, similarity_loss, total_loss, tv_loss, GuideImage, LossBreakdown, LossWeights, PatchImage,
};
pub use render::{render, BoundingBox, RenderConfig, Rendered, Scene};
pub use trainer::{optimize_patch, AttackConfig, PatchInit, TrainLogRecord};
