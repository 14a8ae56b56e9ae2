//! Differentiable detector interface: raw forward passes with gradients back
//! to the input image, attack-target selection, and the post-processed
//! (threshold + NMS) inference used for evaluation.

pub mod darknet;
pub mod net;
pub mod toy;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::render::{BoundingBox, Scene, INPUT_SIZE};

pub use net::{sigmoid, Network};

/// One raw prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    /// Position in the detector's raw prediction list; links the detection
    /// back to the forward pass that produced it.
    pub index: usize,
}

impl Detection {
    pub fn class_prob(&self, class: usize) -> Option<f64> {
        self.class_probs.get(class).copied()
    }

    /// `objectness × class probability`, the usual one-stage confidence.
    pub fn score(&self, class: usize) -> f64 {
        self.objectness * self.class_prob(class).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHandle {
    pub name: String,
    pub person_class_index: usize,
    pub conf_threshold: f64,
    pub input_size: usize,
}

impl DetectorHandle {
    pub fn new(name: impl Into<String>, person_class_index: usize) -> Self {
        Self {
            name: name.into(),
            person_class_index,
            conf_threshold: 0.5,
            input_size: INPUT_SIZE,
        }
    }
}

/// A loaded, immutable detector.
#[derive(Debug, Clone)]
pub struct Detector {
    handle: DetectorHandle,
    net: Network,
    weights_digest: String,
}

/// Cached state of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Image,
    acts: net::Activations,
    pub detections: Vec<Detection>,
}

impl Detector {
    pub fn new(handle: DetectorHandle, net: Network, weights_digest: impl Into<String>) -> Result<Self> {
        let (c, h, w) = net.input_shape();
        if c != 3 || h != handle.input_size || w != handle.input_size {
            return Err(invalid(format!(
                "network input {c}x{h}x{w} does not match detector input size {}",
                handle.input_size
            )));
        }
        let heads = net.heads();
        if heads.is_empty() {
            return Err(Error::Network("network has no detection head".into()));
        }
        for &hd in &heads {
            let classes = net.head(hd).classes;
            if handle.person_class_index >= classes {
                return Err(invalid(format!(
                    "person class {} outside a {classes}-class vocabulary",
                    handle.person_class_index
                )));
            }
        }
        if !(0.0..1.0).contains(&handle.conf_threshold) {
            return Err(invalid(format!(
                "conf_threshold {} must be in [0,1)",
                handle.conf_threshold
            )));
        }
        Ok(Self {
            handle,
            net,
            weights_digest: weights_digest.into(),
        })
    }

    /// Loads darknet cfg + weights files.
    pub fn load_darknet(handle: DetectorHandle, cfg: &Path, weights: &Path) -> Result<Self> {
        let net = darknet::load(cfg, weights)?;
        let bytes = std::fs::read(weights).map_err(|e| Error::Weights {
            path: weights.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::new(handle, net, hex_digest(&bytes))
    }

    pub fn handle(&self) -> &DetectorHandle {
        &self.handle
    }

    pub fn name(&self) -> &str {
        &self.handle.name
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// SHA-256 of the weights file this detector was loaded from.
    pub fn weights_digest(&self) -> &str {
        &self.weights_digest
    }

    /// SHA-256 over the in-memory parameters (exact bit patterns).
    pub fn parameters_digest(&self) -> String {
        let mut h = Sha256::new();
        for layer in self.net.layers() {
            if let net::Layer::Conv(c) = layer {
                for v in c.weights.iter().chain(&c.bias) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        to_hex(&h.finalize())
    }

    pub fn prediction_count(&self) -> usize {
        self.net.prediction_count()
    }

    /// Runs the network and decodes every raw prediction (no NMS).
    pub fn forward(&self, image: &Image) -> Result<ForwardPass> {
        let acts = self.net.forward(image)?;
        let detections = self.decode(&acts);
        Ok(ForwardPass {
            input: image.clone(),
            acts,
            detections,
        })
    }

    pub fn forward_scene(&self, scene: &Scene) -> Result<ForwardPass> {
        self.forward(&scene.image)
    }

    fn decode(&self, acts: &net::Activations) -> Vec<Detection> {
        let (_, net_h, net_w) = self.net.input_shape();
        let mut out = Vec::with_capacity(self.net.prediction_count());
        for li in self.net.heads() {
            let head = self.net.head(li);
            let t = acts.output(li);
            let (_, gh, gw) = t.shape();
            let stride = 5 + head.classes;
            let s = head.scale_xy;
            for (a, &(aw, ah)) in head.anchors.iter().enumerate() {
                let base = a * stride;
                for gy in 0..gh {
                    for gx in 0..gw {
                        let at = |k: usize| t.get(base + k, gy, gx);
                        let cx = (gx as f64 + sigmoid(at(0)) * s - 0.5 * (s - 1.0)) / gw as f64;
                        let cy = (gy as f64 + sigmoid(at(1)) * s - 0.5 * (s - 1.0)) / gh as f64;
                        let w = at(2).exp() * aw / net_w as f64;
                        let h = at(3).exp() * ah / net_h as f64;
                        let objectness = sigmoid(at(4));
                        let class_probs = (0..head.classes).map(|k| sigmoid(at(5 + k))).collect();
                        let index = out.len();
                        out.push(Detection {
                            bbox: BoundingBox::new(cx, cy, w, h, self.handle.person_class_index),
                            objectness,
                            class_probs,
                            index,
                        });
                    }
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the input image given, for some raw predictions,
    /// `(index, ∂L/∂objectness, ∂L/∂person probability)`.
    pub fn backward(&self, pass: &ForwardPass, grads: &[(usize, f64, f64)]) -> Image {
        let head_grads = self.head_gradients(pass, grads);
        self.net
            .backward(&pass.input, &pass.acts, head_grads, true, None)
            .expect("input gradient requested")
    }

    fn head_gradients(&self, pass: &ForwardPass, grads: &[(usize, f64, f64)]) -> Vec<(usize, Image)> {
        let heads = self.net.heads();
        let mut offsets = Vec::with_capacity(heads.len());
        let mut acc = 0;
        for &li in &heads {
            let (_, gh, gw) = self.net.output_shape(li);
            offsets.push(acc);
            acc += self.net.head(li).anchors.len() * gh * gw;
        }
        let mut out: Vec<Option<Image>> = vec![None; heads.len()];
        let person = self.handle.person_class_index;
        for &(index, d_obj, d_cls) in grads {
            let hi = offsets.partition_point(|&o| o <= index) - 1;
            let li = heads[hi];
            let head = self.net.head(li);
            let (c, gh, gw) = self.net.output_shape(li);
            let local = index - offsets[hi];
            let a = local / (gh * gw);
            let cell = local % (gh * gw);
            let (gy, gx) = (cell / gw, cell % gw);
            let g = out[hi].get_or_insert_with(|| Image::new(c, gh, gw));
            let base = a * (5 + head.classes);
            let det = &pass.detections[index];
            let o = det.objectness;
            let p = det.class_probs[person];
            let i_obj = g.index(base + 4, gy, gx);
            g.data_mut()[i_obj] += d_obj * o * (1.0 - o);
            let i_cls = g.index(base + 5 + person, gy, gx);
            g.data_mut()[i_cls] += d_cls * p * (1.0 - p);
        }
        heads
            .into_iter()
            .zip(out)
            .filter_map(|(li, g)| g.map(|g| (li, g)))
            .collect()
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

/// Detections whose objectness exceeds the threshold, or, when none does,
/// the single most confident one.
pub fn select_attack_targets(detections: &[Detection], handle: &DetectorHandle) -> Vec<Detection> {
    let above: Vec<Detection> = detections
        .iter()
        .filter(|d| d.objectness > handle.conf_threshold)
        .cloned()
        .collect();
    if !above.is_empty() {
        return above;
    }
    detections
        .iter()
        .fold(None::<&Detection>, |best, d| match best {
            Some(b) if b.objectness >= d.objectness => Some(b),
            _ => Some(d),
        })
        .cloned()
        .into_iter()
        .collect()
}

/// Greedy non-maximum suppression on person scores; `detections` must
/// already be confidence filtered. Ties keep the lower raw index first.
pub fn nms(mut detections: Vec<Detection>, person: usize, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score(person).total_cmp(&a.score(person)).then(a.index.cmp(&b.index)));
    let mut keep: Vec<Detection> = Vec::new();
    for d in detections {
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Post-processed person detections: `score >= conf_threshold`, then NMS.
pub fn detect(detector: &Detector, image: &Image, iou_nms: f64) -> Result<Vec<Detection>> {
    if !(iou_nms > 0.0 && iou_nms < 1.0) {
        return Err(invalid(format!("NMS IoU {iou_nms} must be in (0,1)")));
    }
    let pass = detector.forward(image)?;
    Ok(postprocess(pass.detections, detector.handle(), iou_nms))
}

pub fn postprocess(detections: Vec<Detection>, handle: &DetectorHandle, iou_nms: f64) -> Vec<Detection> {
    let person = handle.person_class_index;
    let kept = detections
        .into_iter()
        .filter(|d| d.score(person) >= handle.conf_threshold)
        .collect();
    nms(kept, person, iou_nms)
}

/// One text line per detection:
/// `image_id class score x_min y_min x_max y_max` (input pixels).
pub fn detections_to_text(image_id: &str, detections: &[Detection], class: usize, input_size: usize) -> String {
    let mut s = String::new();
    let k = input_size as f64;
    for d in detections {
        let (x0, y0, x1, y1) = d.bbox.corners();
        let _ = writeln!(
            s,
            "{image_id} {class} {:.6} {:.2} {:.2} {:.2} {:.2}",
            d.score(class),
            x0 * k,
            y0 * k,
            x1 * k,
            y1 * k
        );
    }
    s
}
