//! A small layer-graph engine covering the darknet one-stage detector layer
//! set (convolution, max-pool, upsample, route, shortcut, yolo head), with a
//! reverse pass for input gradients and, for training the toy detector,
//! parameter gradients.
//!
//! Convolutions go through im2col and `matrixmultiply::dgemm`, single
//! threaded, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Leaky,
    Relu,
    Logistic,
    Mish,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => Self::Linear,
            "leaky" => Self::Leaky,
            "relu" => Self::Relu,
            "logistic" => Self::Logistic,
            "mish" => Self::Mish,
            other => return Err(Error::Network(format!("unsupported activation {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Leaky => "leaky",
            Self::Relu => "relu",
            Self::Logistic => "logistic",
            Self::Mish => "mish",
        }
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match self {
            Self::Linear => x,
            Self::Leaky => {
                if x > 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            Self::Relu => x.max(0.0),
            Self::Logistic => sigmoid(x),
            Self::Mish => x * softplus(x).tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::Leaky => {
                if x > 0.0 {
                    1.0
                } else {
                    0.1
                }
            }
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Logistic => y * (1.0 - y),
            Self::Mish => {
                let sp = softplus(x);
                let t = sp.tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_c][in_c][size][size]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Conv {
    pub fn fan_in(&self) -> usize {
        self.in_c * self.size * self.size
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.size) / self.stride + 1,
            (w + 2 * self.pad - self.size) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.size == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Anchors (in input pixels) and decoding parameters of one detection head.
#[derive(Debug, Clone, PartialEq)]
pub struct YoloHead {
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
    pub scale_xy: f64,
}

impl YoloHead {
    pub fn channels(&self) -> usize {
        self.anchors.len() * (5 + self.classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    MaxPool {
        size: usize,
        stride: usize,
        pad: usize,
    },
    Upsample {
        stride: usize,
    },
    Route {
        sources: Vec<usize>,
        groups: usize,
        group_id: usize,
    },
    Shortcut {
        from: usize,
    },
    Yolo(YoloHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: (usize, usize, usize),
    layers: Vec<Layer>,
    shapes: Vec<(usize, usize, usize)>,
}

/// Per-layer outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    outputs: Vec<Image>,
    /// Pre-activation of conv layers whose derivative needs it.
    pre: Vec<Option<Image>>,
}

impl Activations {
    pub fn output(&self, layer: usize) -> &Image {
        &self.outputs[layer]
    }
}

/// Accumulated parameter gradients, one entry per conv layer.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub conv: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl ParamGrads {
    pub fn zeros(net: &Network) -> Self {
        Self {
            conv: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Some((vec![0.0; c.weights.len()], vec![0.0; c.bias.len()])),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.iter_mut().zip(bw).for_each(|(x, y)| *x += y);
                ab.iter_mut().zip(bb).for_each(|(x, y)| *x += y);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa);
    debug_assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the strides above,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &Image, conv: &Conv, oh: usize, ow: usize) -> Vec<f64> {
    let (c_in, h, w) = input.shape();
    let k = conv.size;
    let n = oh * ow;
    let mut col = vec![0.0; c_in * k * k * n];
    for c in 0..c_in {
        let plane = input.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], conv: &Conv, in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Image {
    let (c_in, h, w) = in_shape;
    let k = conv.size;
    let n = oh * ow;
    let mut out = Image::new(c_in, h, w);
    for c in 0..c_in {
        let plane = out.plane_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Darknet max-pool geometry: `(out_h, out_w, offset)`.
fn maxpool_dims(h: usize, w: usize, size: usize, stride: usize, pad: usize) -> (usize, usize, isize) {
    (
        (h + pad - size) / stride + 1,
        (w + pad - size) / stride + 1,
        -((pad / 2) as isize),
    )
}

impl Network {
    /// Builds the network and infers every layer's output shape.
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>) -> Result<Self> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let prev = if i == 0 { input } else { shapes[i - 1] };
            let shape = match layer {
                Layer::Conv(c) => {
                    if c.in_c != prev.0 {
                        return Err(Error::Network(format!(
                            "layer {i}: conv expects {} input channels, got {}",
                            c.in_c, prev.0
                        )));
                    }
                    if c.weights.len() != c.out_c * c.fan_in() || c.bias.len() != c.out_c {
                        return Err(Error::Network(format!("layer {i}: conv parameter count mismatch")));
                    }
                    if prev.1 + 2 * c.pad < c.size || prev.2 + 2 * c.pad < c.size || c.stride == 0 {
                        return Err(Error::Network(format!("layer {i}: conv kernel larger than input")));
                    }
                    let (oh, ow) = c.out_dims(prev.1, prev.2);
                    (c.out_c, oh, ow)
                }
                Layer::MaxPool { size, stride, pad } => {
                    if *stride == 0 || prev.1 + pad < *size {
                        return Err(Error::Network(format!("layer {i}: bad maxpool geometry")));
                    }
                    let (oh, ow, _) = maxpool_dims(prev.1, prev.2, *size, *stride, *pad);
                    (prev.0, oh, ow)
                }
                Layer::Upsample { stride } => (prev.0, prev.1 * stride, prev.2 * stride),
                Layer::Route {
                    sources,
                    groups,
                    group_id,
                } => {
                    if sources.is_empty() || *groups == 0 || group_id >= groups {
                        return Err(Error::Network(format!("layer {i}: bad route")));
                    }
                    let mut c_total = 0;
                    let mut hw = None;
                    for &s in sources {
                        if s >= i {
                            return Err(Error::Network(format!("layer {i}: route to later layer {s}")));
                        }
                        let (c, h, w) = shapes[s];
                        if c % groups != 0 {
                            return Err(Error::Network(format!(
                                "layer {i}: {c} channels not divisible by {groups} groups"
                            )));
                        }
                        if let Some(prev_hw) = hw {
                            if prev_hw != (h, w) {
                                return Err(Error::Network(format!("layer {i}: route spatial mismatch")));
                            }
                        }
                        hw = Some((h, w));
                        c_total += c / groups;
                    }
                    let (h, w) = hw.expect("non-empty sources");
                    (c_total, h, w)
                }
                Layer::Shortcut { from } => {
                    if *from >= i || shapes[*from] != prev {
                        return Err(Error::Network(format!("layer {i}: shortcut shape mismatch")));
                    }
                    prev
                }
                Layer::Yolo(y) => {
                    if prev.0 != y.channels() {
                        return Err(Error::Network(format!(
                            "layer {i}: yolo head expects {} channels, got {}",
                            y.channels(),
                            prev.0
                        )));
                    }
                    prev
                }
            };
            shapes.push(shape);
        }
        Ok(Self { input, layers, shapes })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_shape(&self, layer: usize) -> (usize, usize, usize) {
        self.shapes[layer]
    }

    /// Indices of the yolo head layers, in order.
    pub fn heads(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Yolo(_)).then_some(i))
            .collect()
    }

    pub fn head(&self, layer: usize) -> &YoloHead {
        match &self.layers[layer] {
            Layer::Yolo(h) => h,
            _ => panic!("layer {layer} is not a yolo head"),
        }
    }

    /// Total raw prediction count over all heads.
    pub fn prediction_count(&self) -> usize {
        self.heads()
            .iter()
            .map(|&i| {
                let (_, h, w) = self.shapes[i];
                self.head(i).anchors.len() * h * w
            })
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }

    fn layer_input<'a>(&self, i: usize, input: &'a Image, outputs: &'a [Image]) -> &'a Image {
        if i == 0 {
            input
        } else {
            &outputs[i - 1]
        }
    }

    pub fn forward(&self, input: &Image) -> Result<Activations> {
        if input.shape() != self.input {
            return Err(Error::Shape {
                expected: crate::image::shape_str(self.input),
                actual: crate::image::shape_str(input.shape()),
            });
        }
        let mut outputs: Vec<Image> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Option<Image>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = self.layer_input(i, input, &outputs);
            let (oc, oh, ow) = self.shapes[i];
            let (out, keep_pre) = match layer {
                Layer::Conv(conv) => {
                    let n = oh * ow;
                    let mut y = Image::new(oc, oh, ow);
                    let owned;
                    let col: &[f64] = if conv.is_pointwise() {
                        x.data()
                    } else {
                        owned = im2col(x, conv, oh, ow);
                        &owned
                    };
                    {
                        let yd = y.data_mut();
                        for (o, row) in yd.chunks_mut(n).enumerate() {
                            row.fill(conv.bias[o]);
                        }
                        dgemm(
                            oc,
                            conv.fan_in(),
                            n,
                            &conv.weights,
                            (conv.fan_in(), 1),
                            col,
                            (n, 1),
                            1.0,
                            yd,
                        );
                    }
                    if conv.activation == Activation::Linear {
                        (y, None)
                    } else {
                        let mut z = y.clone();
                        for v in z.data_mut() {
                            *v = conv.activation.apply(*v);
                        }
                        let keep = matches!(conv.activation, Activation::Mish).then_some(y);
                        (z, keep)
                    }
                }
                Layer::MaxPool { size, stride, pad } => {
                    let (_, ih, iw) = x.shape();
                    let (_, _, off) = maxpool_dims(ih, iw, *size, *stride, *pad);
                    let mut y = Image::new(oc, oh, ow);
                    for c in 0..oc {
                        let src = x.plane(c);
                        let dst = y.plane_mut(c);
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for ky in 0..*size {
                                    let iy = (oy * stride + ky) as isize + off;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..*size {
                                        let ix = (ox * stride + kx) as isize + off;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        best = best.max(src[iy as usize * iw + ix as usize]);
                                    }
                                }
                                dst[oy * ow + ox] = best;
                            }
                        }
                    }
                    (y, None)
                }
                Layer::Upsample { stride } => {
                    let iw = x.width();
                    let y = Image::from_fn(oc, oh, ow, |c, yy, xx| {
                        x.data()[(c * x.height() + yy / stride) * iw + xx / stride]
                    });
                    (y, None)
                }
                Layer::Route {
                    sources,
                    groups,
                    group_id,
                } => {
                    let mut data = Vec::with_capacity(oc * oh * ow);
                    for &s in sources {
                        let src = &outputs[s];
                        let per = src.channels() / groups;
                        for c in per * group_id..per * (group_id + 1) {
                            data.extend_from_slice(src.plane(c));
                        }
                    }
                    (Image::from_vec(oc, oh, ow, data)?, None)
                }
                Layer::Shortcut { from } => {
                    let mut y = x.clone();
                    y.add_assign(&outputs[*from]);
                    (y, None)
                }
                Layer::Yolo(_) => (x.clone(), None),
            };
            outputs.push(out);
            pre.push(keep_pre);
        }
        Ok(Activations { outputs, pre })
    }

    /// Reverse pass. `head_grads` gives the gradient w.r.t. the output of
    /// some layers (normally the yolo heads). Returns the input gradient when
    /// `want_input_grad`; accumulates conv parameter gradients into `params`.
    pub fn backward(
        &self,
        input: &Image,
        acts: &Activations,
        head_grads: Vec<(usize, Image)>,
        want_input_grad: bool,
        mut params: Option<&mut ParamGrads>,
    ) -> Option<Image> {
        let nl = self.layers.len();
        let mut grads: Vec<Option<Image>> = vec![None; nl];
        for (i, g) in head_grads {
            accumulate(&mut grads[i], g);
        }
        let mut input_grad: Option<Image> = None;
        for i in (0..nl).rev() {
            let Some(g) = grads[i].take() else { continue };
            let x = self.layer_input(i, input, &acts.outputs);
            let need_x_grad = i > 0 || want_input_grad;
            let mut to_prev: Option<Image> = None;
            match &self.layers[i] {
                Layer::Conv(conv) => {
                    let (oc, oh, ow) = self.shapes[i];
                    let n = oh * ow;
                    let mut gp = g;
                    if conv.activation != Activation::Linear {
                        let out = &acts.outputs[i];
                        let pre = acts.pre[i].as_ref();
                        for (k, v) in gp.data_mut().iter_mut().enumerate() {
                            let y = out.data()[k];
                            let xpre = pre.map_or(y, |p| p.data()[k]);
                            *v *= conv.activation.derivative(xpre, y);
                        }
                    }
                    let owned;
                    let col: Option<&[f64]> = if params.is_some() {
                        Some(if conv.is_pointwise() {
                            x.data()
                        } else {
                            owned = im2col(x, conv, oh, ow);
                            &owned
                        })
                    } else {
                        None
                    };
                    if let (Some(pg), Some(col)) = (params.as_deref_mut(), col) {
                        let (dw, db) = pg.conv[i].as_mut().expect("conv slot");
                        dgemm(oc, n, conv.fan_in(), gp.data(), (n, 1), col, (1, n), 1.0, dw);
                        for (o, row) in gp.data().chunks(n).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    }
                    if need_x_grad {
                        let kk = conv.fan_in();
                        let mut dcol = vec![0.0; kk * n];
                        dgemm(kk, oc, n, &conv.weights, (1, kk), gp.data(), (n, 1), 0.0, &mut dcol);
                        let dx = if conv.is_pointwise() {
                            Image::from_vec(x.channels(), x.height(), x.width(), dcol).expect("pointwise shape")
                        } else {
                            col2im(&dcol, conv, x.shape(), oh, ow)
                        };
                        to_prev = Some(dx);
                    }
                }
                Layer::MaxPool { size, stride, pad } => {
                    if need_x_grad {
                        let (oc, oh, ow) = self.shapes[i];
                        let (_, ih, iw) = x.shape();
                        let (_, _, off) = maxpool_dims(ih, iw, *size, *stride, *pad);
                        let mut dx = Image::new(oc, ih, iw);
                        for c in 0..oc {
                            let src = x.plane(c);
                            let gsrc = g.plane(c);
                            let dst = dx.plane_mut(c);
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut at = usize::MAX;
                                    for ky in 0..*size {
                                        let iy = (oy * stride + ky) as isize + off;
                                        if iy < 0 || iy >= ih as isize {
                                            continue;
                                        }
                                        for kx in 0..*size {
                                            let ix = (ox * stride + kx) as isize + off;
                                            if ix < 0 || ix >= iw as isize {
                                                continue;
                                            }
                                            let j = iy as usize * iw + ix as usize;
                                            if src[j] > best {
                                                best = src[j];
                                                at = j;
                                            }
                                        }
                                    }
                                    if at != usize::MAX {
                                        dst[at] += gsrc[oy * ow + ox];
                                    }
                                }
                            }
                        }
                        to_prev = Some(dx);
                    }
                }
                Layer::Upsample { stride } => {
                    if need_x_grad {
                        let (c_in, ih, iw) = x.shape();
                        let ow = iw * stride;
                        let mut dx = Image::new(c_in, ih, iw);
                        for c in 0..c_in {
                            let gsrc = g.plane(c);
                            let dst = dx.plane_mut(c);
                            for (k, v) in gsrc.iter().enumerate() {
                                let (yy, xx) = (k / ow, k % ow);
                                dst[(yy / stride) * iw + xx / stride] += v;
                            }
                        }
                        to_prev = Some(dx);
                    }
                }
                Layer::Route {
                    sources,
                    groups,
                    group_id,
                } => {
                    let mut offset = 0;
                    for &s in sources {
                        let (sc, sh, sw) = self.shapes[s];
                        let per = sc / groups;
                        let mut part = Image::new(sc, sh, sw);
                        for c in 0..per {
                            part.plane_mut(per * group_id + c).copy_from_slice(g.plane(offset + c));
                        }
                        offset += per;
                        accumulate(&mut grads[s], part);
                    }
                }
                Layer::Shortcut { from } => {
                    accumulate(&mut grads[*from], g.clone());
                    to_prev = Some(g);
                }
                Layer::Yolo(_) => to_prev = Some(g),
            }
            if let Some(dx) = to_prev {
                if i == 0 {
                    if want_input_grad {
                        input_grad = Some(dx);
                    }
                } else {
                    accumulate(&mut grads[i - 1], dx);
                }
            }
        }
        if want_input_grad {
            Some(input_grad.unwrap_or_else(|| Image::new(self.input.0, self.input.1, self.input.2)))
        } else {
            None
        }
    }
}

fn accumulate(slot: &mut Option<Image>, g: Image) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
