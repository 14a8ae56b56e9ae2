//! The bundled toy person detector: a seven-conv single-head network on
//! 416×416 input, trained on synthetic scenes with random occluders. The
//! weights ship in `assets/` and are regenerated by the
//! `train_toy_detector` example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::net::{sigmoid, Layer, Network, ParamGrads};
use super::{darknet, hex_digest, Detector, DetectorHandle};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{Adam, AdamState};
use crate::render::BoundingBox;
use crate::synthetic::{generate_scene, SyntheticConfig};

pub const TOY_CFG: &str = include_str!("../../assets/toy_detector.cfg");
pub const TOY_WEIGHTS: &[u8] = include_bytes!("../../assets/toy_detector.weights");
pub const TOY_NAME: &str = "toy-person";

pub fn toy_handle() -> DetectorHandle {
    DetectorHandle::new(TOY_NAME, 0)
}

/// Loads the bundled, pre-trained toy detector.
pub fn toy_detector() -> Result<Detector> {
    if TOY_WEIGHTS.is_empty() {
        return Err(Error::Weights {
            path: "assets/toy_detector.weights".into(),
            reason: "bundled weights are empty; run the train_toy_detector example".into(),
        });
    }
    let net = darknet::load_from_bytes(TOY_CFG, TOY_WEIGHTS)?;
    Detector::new(toy_handle(), net, hex_digest(TOY_WEIGHTS))
}

#[derive(Debug, Clone)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub scenes: SyntheticConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 8,
            lr: 1e-3,
            seed: 7,
            scenes: SyntheticConfig {
                occluder_prob: 0.5,
                ..SyntheticConfig::default()
            },
        }
    }
}

/// He-initialized network for `cfg`; the output layer starts near zero with
/// a negative objectness bias so early training is not swamped by
/// background cells.
pub fn init_network(cfg: &str, seed: u64) -> Result<Network> {
    let mut net = darknet::build_untrained(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = net.heads();
    let strides: Vec<usize> = heads.iter().map(|&h| 5 + net.head(h).classes).collect();
    let n = net.layers().len();
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let Layer::Conv(c) = layer else { continue };
        let feeds_head = i + 1 < n && heads.contains(&(i + 1));
        let std = if feeds_head {
            0.01
        } else {
            (2.0 / c.fan_in() as f64).sqrt()
        };
        let dist = Normal::new(0.0, std).expect("positive std");
        c.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        c.bias.iter_mut().for_each(|b| *b = 0.0);
        if let Some(hi) = heads.iter().position(|&h| h == i + 1) {
            for b in c.bias.iter_mut().skip(4).step_by(strides[hi]) {
                *b = -4.0;
            }
        }
    }
    Ok(net)
}

fn bce_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// YOLO-style training loss for one image on every head: squared error on
/// sigmoid offsets and log size ratios for the responsible anchor, BCE on
/// objectness (background predictions overlapping a target by more than
/// 0.5 are ignored) and BCE on the person class. Returns the loss and the
/// gradient w.r.t. every head output.
pub fn yolo_loss(net: &Network, outputs: &[&Image], targets: &[BoundingBox]) -> (f64, Vec<Image>) {
    let (_, net_h, net_w) = net.input_shape();
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (hi, li) in net.heads().into_iter().enumerate() {
        let head = net.head(li);
        let t = outputs[hi];
        let (c, gh, gw) = t.shape();
        let mut g = Image::new(c, gh, gw);
        let stride = 5 + head.classes;

        // Responsible (anchor, cell) per target: best anchor by shape IoU.
        let mut assigned: Vec<(usize, usize, usize, &BoundingBox)> = Vec::new();
        for b in targets {
            let gx = ((b.cx * gw as f64) as usize).min(gw - 1);
            let gy = ((b.cy * gh as f64) as usize).min(gh - 1);
            let (bw, bh) = (b.w * net_w as f64, b.h * net_h as f64);
            let best = head
                .anchors
                .iter()
                .enumerate()
                .map(|(a, &(aw, ah))| {
                    let inter = bw.min(aw) * bh.min(ah);
                    (a, inter / (bw * bh + aw * ah - inter))
                })
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(a, _)| a)
                .unwrap_or(0);
            assigned.retain(|&(a, y, x, _)| (a, y, x) != (best, gy, gx));
            assigned.push((best, gy, gx, b));
        }

        for (a, &(aw, ah)) in head.anchors.iter().enumerate() {
            let base = a * stride;
            for gy in 0..gh {
                for gx in 0..gw {
                    let z = |k: usize| t.get(base + k, gy, gx);
                    if let Some(&(_, _, _, b)) = assigned.iter().find(|&&(aa, y, x, _)| (aa, y, x) == (a, gy, gx)) {
                        let k = 2.0 - b.w * b.h;
                        let fx = b.cx * gw as f64 - gx as f64;
                        let fy = b.cy * gh as f64 - gy as f64;
                        let tw = (b.w * net_w as f64 / aw).ln();
                        let th = (b.h * net_h as f64 / ah).ln();
                        for (off, target) in [(0, fx), (1, fy)] {
                            let s = sigmoid(z(off));
                            loss += k * (s - target).powi(2);
                            g.set(base + off, gy, gx, 2.0 * k * (s - target) * s * (1.0 - s));
                        }
                        for (off, target) in [(2, tw), (3, th)] {
                            loss += k * (z(off) - target).powi(2);
                            g.set(base + off, gy, gx, 2.0 * k * (z(off) - target));
                        }
                        loss += bce_logits(z(4), 1.0);
                        g.set(base + 4, gy, gx, sigmoid(z(4)) - 1.0);
                        for cls in 0..head.classes {
                            let target = if cls == b.class_id { 1.0 } else { 0.0 };
                            loss += bce_logits(z(5 + cls), target);
                            g.set(base + 5 + cls, gy, gx, sigmoid(z(5 + cls)) - target);
                        }
                        continue;
                    }
                    let s = head.scale_xy;
                    let pred = BoundingBox::new(
                        (gx as f64 + sigmoid(z(0)) * s - 0.5 * (s - 1.0)) / gw as f64,
                        (gy as f64 + sigmoid(z(1)) * s - 0.5 * (s - 1.0)) / gh as f64,
                        z(2).exp() * aw / net_w as f64,
                        z(3).exp() * ah / net_h as f64,
                        0,
                    );
                    if targets.iter().any(|b| b.iou(&pred) > 0.5) {
                        continue;
                    }
                    loss += bce_logits(z(4), 0.0);
                    g.set(base + 4, gy, gx, sigmoid(z(4)));
                }
            }
        }
        grads.push(g);
    }
    (loss, grads)
}

/// Trains a fresh toy network on an endless stream of seeded synthetic
/// scenes. `progress(step, mean_loss)` is called after every step.
pub fn train(cfg: &ToyTrainConfig, mut progress: impl FnMut(usize, f64)) -> Result<Network> {
    let mut net = init_network(TOY_CFG, cfg.seed)?;
    let adam = Adam::new(cfg.lr, 0.9, 0.999);
    let mut states: Vec<Option<(AdamState, AdamState)>> = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => Some((adam.init(c.weights.len()), adam.init(c.bias.len()))),
            _ => None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let heads = net.heads();
    for step in 0..cfg.steps {
        let mut grads = ParamGrads::zeros(&net);
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let scene = generate_scene(rng.gen(), &cfg.scenes);
            let acts = net.forward(&scene.image)?;
            let outs: Vec<&Image> = heads.iter().map(|&h| acts.output(h)).collect();
            let (loss, head_grads) = yolo_loss(&net, &outs, &scene.boxes);
            total += loss;
            let head_grads = heads.iter().copied().zip(head_grads).collect();
            net.backward(&scene.image, &acts, head_grads, false, Some(&mut grads));
        }
        let k = 1.0 / cfg.batch as f64;
        for ((layer, state), g) in net.layers_mut().iter_mut().zip(&mut states).zip(&grads.conv) {
            if let (Layer::Conv(c), Some((sw, sb)), Some((gw, gb))) = (layer, state.as_mut(), g.as_ref()) {
                let gw: Vec<f64> = gw.iter().map(|v| v * k).collect();
                let gb: Vec<f64> = gb.iter().map(|v| v * k).collect();
                adam.step(sw, &mut c.weights, &gw);
                adam.step(sb, &mut c.bias, &gb);
            }
        }
        let mean = total * k;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                term: "toy_detector_loss",
                epoch: 0,
                step,
            });
        }
        progress(step, mean);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_image_has_no_confident_person() {
        let det = toy_detector().unwrap();
        let pass = det.forward(&Image::new(3, 416, 416)).unwrap();
        let max = pass.detections.iter().map(|d| d.objectness).fold(0.0, f64::max);
        // Observed with the bundled weights; retraining them changes this value.
        assert!((max - 1.520726e-2).abs() < 1e-7, "max objectness {max:e}");
    }

    #[test]
    fn cfg_shapes() {
        let net = darknet::build_untrained(TOY_CFG).unwrap();
        assert_eq!(net.output_shape(6), (12, 13, 13));
        assert_eq!(net.prediction_count(), 338);
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let net = init_network(TOY_CFG, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Image::from_fn(12, 13, 13, |_, _, _| rng.gen_range(-2.0..2.0));
        let targets = vec![
            BoundingBox::new(0.3, 0.4, 0.12, 0.4, 0),
            BoundingBox::new(0.7, 0.6, 0.2, 0.5, 0),
        ];
        let (_, g) = yolo_loss(&net, &[&t], &targets);
        let h = 1e-6;
        for i in (0..t.len()).step_by(7) {
            let mut p = t.clone();
            p.data_mut()[i] += h;
            let mut m = t.clone();
            m.data_mut()[i] -= h;
            let fd = (yolo_loss(&net, &[&p], &targets).0 - yolo_loss(&net, &[&m], &targets).0) / (2.0 * h);
            let an = g[0].data()[i];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                "coord {i}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ToyTrainConfig {
            steps: 12,
            batch: 2,
            lr: 3e-3,
            ..ToyTrainConfig::default()
        };
        let mut losses = Vec::new();
        train(&cfg, |_, l| losses.push(l)).unwrap();
        let head: f64 = losses[..3].iter().sum();
        let tail: f64 = losses[losses.len() - 3..].iter().sum();
        assert!(tail < head, "{losses:?}");
    }
}
