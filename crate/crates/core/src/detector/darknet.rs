//! Darknet `.cfg` / `.weights` loading for one-stage YOLO-family detectors.
//!
//! Batch-norm parameters are folded into the convolution at load time, which
//! pins the network in inference mode.

use std::path::Path;

use crate::detector::net::{Activation, Conv, Layer, Network, YoloHead};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Network(format!("[{}] {key}={v:?} is not an integer", self.name))),
        }
    }

    fn isize_list(&self, key: &str) -> Result<Vec<isize>> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Network(format!("[{}] missing {key}", self.name)))?;
        v.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Network(format!("[{}] bad {key} entry {t:?}", self.name)))
            })
            .collect()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Network(format!("[{}] {key}={v:?} is not a number", self.name))),
        }
    }
}

/// Splits a darknet cfg into sections of `key=value` pairs.
pub fn parse_cfg(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push(Section {
                name: name.trim().to_string(),
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Network(format!("cfg line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let sec = sections
            .last_mut()
            .ok_or_else(|| Error::Network(format!("cfg line {}: entry before any section", lineno + 1)))?;
        sec.entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(sections)
}

/// Conv layer description before weights are attached.
struct ConvSpec {
    index: usize,
    batch_norm: bool,
}

fn resolve_index(i: usize, rel: isize) -> Result<usize> {
    let idx = if rel < 0 { i as isize + rel } else { rel };
    if idx < 0 || idx as usize >= i {
        return Err(Error::Network(format!("layer {i}: reference {rel} out of range")));
    }
    Ok(idx as usize)
}

/// Builds a network skeleton (zero weights) from cfg text; returns it with
/// the conv layers that carry batch norm in the weights file.
fn build(cfg: &str) -> Result<(Network, Vec<ConvSpec>)> {
    let sections = parse_cfg(cfg)?;
    let mut iter = sections.into_iter();
    let net = iter
        .next()
        .filter(|s| s.name == "net" || s.name == "network")
        .ok_or_else(|| Error::Network("cfg must start with [net]".into()))?;
    let input = (
        net.usize_or("channels", 3)?,
        net.usize_or("height", 416)?,
        net.usize_or("width", 416)?,
    );

    let mut layers = Vec::new();
    let mut specs = Vec::new();
    let mut channels: Vec<usize> = Vec::new();
    for (i, sec) in iter.enumerate() {
        let prev_c = if i == 0 { input.0 } else { channels[i - 1] };
        let (layer, out_c) = match sec.name.as_str() {
            "convolutional" => {
                let size = sec.usize_or("size", 1)?;
                let out_c = sec.usize_or("filters", 1)?;
                let pad = if sec.usize_or("pad", 0)? != 0 {
                    size / 2
                } else {
                    sec.usize_or("padding", 0)?
                };
                if sec.usize_or("groups", 1)? != 1 {
                    return Err(Error::Network(format!(
                        "layer {i}: grouped convolution is not supported"
                    )));
                }
                let batch_norm = sec.usize_or("batch_normalize", 0)? != 0;
                specs.push(ConvSpec { index: i, batch_norm });
                let conv = Conv {
                    in_c: prev_c,
                    out_c,
                    size,
                    stride: sec.usize_or("stride", 1)?,
                    pad,
                    weights: vec![0.0; out_c * prev_c * size * size],
                    bias: vec![0.0; out_c],
                    activation: Activation::parse(sec.get("activation").unwrap_or("logistic"))?,
                };
                (Layer::Conv(conv), out_c)
            }
            "maxpool" => {
                let size = sec.usize_or("size", 1)?;
                let stride = sec.usize_or("stride", 1)?;
                let pad = sec.usize_or("padding", size - 1)?;
                (Layer::MaxPool { size, stride, pad }, prev_c)
            }
            "upsample" => (
                Layer::Upsample {
                    stride: sec.usize_or("stride", 2)?,
                },
                prev_c,
            ),
            "route" => {
                let sources = sec
                    .isize_list("layers")?
                    .into_iter()
                    .map(|r| resolve_index(i, r))
                    .collect::<Result<Vec<_>>>()?;
                let groups = sec.usize_or("groups", 1)?;
                let group_id = sec.usize_or("group_id", 0)?;
                let c = sources.iter().map(|&s| channels[s] / groups.max(1)).sum();
                (
                    Layer::Route {
                        sources,
                        groups,
                        group_id,
                    },
                    c,
                )
            }
            "shortcut" => {
                let from = resolve_index(i, sec.isize_list("from")?[0])?;
                if sec.get("activation").unwrap_or("linear") != "linear" {
                    return Err(Error::Network(format!(
                        "layer {i}: only linear shortcuts are supported"
                    )));
                }
                (Layer::Shortcut { from }, prev_c)
            }
            "yolo" => {
                let classes = sec.usize_or("classes", 80)?;
                let raw = sec.isize_list("anchors")?;
                if raw.len() % 2 != 0 {
                    return Err(Error::Network(format!("layer {i}: odd anchor list")));
                }
                let all: Vec<(f64, f64)> = raw.chunks(2).map(|p| (p[0] as f64, p[1] as f64)).collect();
                let mask: Vec<usize> = match sec.get("mask") {
                    Some(_) => sec.isize_list("mask")?.into_iter().map(|m| m as usize).collect(),
                    None => (0..all.len()).collect(),
                };
                let anchors = mask
                    .iter()
                    .map(|&m| {
                        all.get(m)
                            .copied()
                            .ok_or_else(|| Error::Network(format!("layer {i}: mask {m} out of range")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let head = YoloHead {
                    anchors,
                    classes,
                    scale_xy: sec.f64_or("scale_x_y", 1.0)?,
                };
                (Layer::Yolo(head), prev_c)
            }
            other => return Err(Error::Network(format!("layer {i}: unsupported section [{other}]"))),
        };
        layers.push(layer);
        channels.push(out_c);
    }
    Ok((Network::new(input, layers)?, specs))
}

/// Reads the darknet weights layout (header, then per conv layer: biases,
/// optional BN scales/means/variances, kernel) into a network built from
/// `cfg`.
pub fn load_from_bytes(cfg: &str, weights: &[u8]) -> Result<Network> {
    let (mut net, specs) = build(cfg)?;
    let mut cur = Cursor { buf: weights, pos: 0 };
    let major = cur.i32()?;
    let minor = cur.i32()?;
    let _revision = cur.i32()?;
    if major * 10 + minor >= 2 {
        cur.take(8)?;
    } else {
        cur.take(4)?;
    }
    for spec in &specs {
        let Layer::Conv(conv) = &mut net.layers_mut()[spec.index] else {
            unreachable!("spec points at a conv layer")
        };
        let n = conv.out_c;
        let bias = cur.f32s(n)?;
        let bn = if spec.batch_norm {
            Some((cur.f32s(n)?, cur.f32s(n)?, cur.f32s(n)?))
        } else {
            None
        };
        let kernel = cur.f32s(conv.weights.len())?;
        let per = conv.fan_in();
        for o in 0..n {
            let (gain, shift) = match &bn {
                Some((scale, mean, var)) => {
                    let g = scale[o] / (var[o] + BN_EPS).sqrt();
                    (g, bias[o] - g * mean[o])
                }
                None => (1.0, bias[o]),
            };
            conv.bias[o] = shift;
            for k in 0..per {
                conv.weights[o * per + k] = gain * kernel[o * per + k];
            }
        }
    }
    if cur.pos != weights.len() {
        return Err(Error::Network(format!(
            "weights file has {} trailing bytes",
            weights.len() - cur.pos
        )));
    }
    Ok(net)
}

pub fn load(cfg_path: &Path, weights_path: &Path) -> Result<Network> {
    let cfg = std::fs::read_to_string(cfg_path).map_err(|e| Error::Weights {
        path: cfg_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let weights = std::fs::read(weights_path).map_err(|e| Error::Weights {
        path: weights_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    load_from_bytes(&cfg, &weights).map_err(|e| Error::Weights {
        path: weights_path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Serializes conv parameters in the darknet layout without batch norm
/// (major 0, minor 2). Only valid for cfgs whose conv layers have
/// `batch_normalize=0`.
pub fn save_to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0i32, 2, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&0u64.to_le_bytes());
    for layer in net.layers() {
        if let Layer::Conv(c) = layer {
            for &b in &c.bias {
                out.extend_from_slice(&(b as f32).to_le_bytes());
            }
            for &w in &c.weights {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Builds a network from cfg text with freshly initialized weights.
pub fn build_untrained(cfg: &str) -> Result<Network> {
    let (net, specs) = build(cfg)?;
    if specs.iter().any(|s| s.batch_norm) {
        return Err(Error::Network(
            "untrained build does not support batch_normalize".into(),
        ));
    }
    Ok(net)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Network(format!(
                "weights file truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn i32(&mut self) -> Result<i32> {
        let b = self.take(4)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}
