//! Planar floating-point image buffers and the bilinear resampling operator
//! shared by the warps, the rotation and the patch resize.
//!
//! Every differentiable geometric op in this crate is a fixed linear map from
//! input pixels to output pixels once its sampling coordinates are known. The
//! map is recorded as a [`BilinearMap`] so the backward pass is just the
//! transpose (a scatter of the same four taps).

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Channel-planar (`C × H × W`) image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image by evaluating `f(channel, row, col)` at every sample.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: shape_str(self.shape()),
                actual: shape_str(other.shape()),
            })
        }
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Image) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Converts an 8-bit RGB buffer to a 3-channel image in `[0,1]`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Image::new(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
            }
        }
        out
    }

    /// Quantizes a 3-channel image to 8-bit RGB (values clamped to `[0,1]`).
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape {
                expected: "3 channels".into(),
                actual: format!("{} channels", self.channels),
            });
        }
        Ok(ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = quantize(self.get(c, y as usize, x as usize));
            }
            Rgb(px)
        }))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resize to `out_h × out_w` with pixel-center alignment.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        BilinearMap::resize(self.height, self.width, out_h, out_w).apply(self)
    }
}

pub(crate) fn shape_str((c, h, w): (usize, usize, usize)) -> String {
    format!("{c}x{h}x{w}")
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One output sample of a bilinear map: the four neighbouring input pixels
/// (row-major plane offsets) and the fractional offsets along x and y.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i00: u32,
    i01: u32,
    i10: u32,
    i11: u32,
    fx: f64,
    fy: f64,
}

/// A fixed bilinear resampling of one `in_h × in_w` plane into an
/// `out_h × out_w` plane, applied identically to every channel.
///
/// Sample coordinates are clamped to the input extent, which is the same as
/// edge replication.
#[derive(Debug, Clone)]
pub struct BilinearMap {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<Tap>,
}

impl BilinearMap {
    /// `source(row, col)` returns the `(x, y)` input coordinate sampled by the
    /// output pixel at `(row, col)`; pixel centers sit at integer coordinates.
    pub fn from_fn(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut source: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        assert!(in_h > 0 && in_w > 0, "bilinear map needs a non-empty input");
        let max_x = (in_w - 1) as f64;
        let max_y = (in_h - 1) as f64;
        let mut taps = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            for c in 0..out_w {
                let (sx, sy) = source(r, c);
                let sx = if sx.is_nan() { 0.0 } else { sx.clamp(0.0, max_x) };
                let sy = if sy.is_nan() { 0.0 } else { sy.clamp(0.0, max_y) };
                let x0 = (sx.floor() as usize).min(in_w - 1);
                let y0 = (sy.floor() as usize).min(in_h - 1);
                let x1 = (x0 + 1).min(in_w - 1);
                let y1 = (y0 + 1).min(in_h - 1);
                taps.push(Tap {
                    i00: (y0 * in_w + x0) as u32,
                    i01: (y0 * in_w + x1) as u32,
                    i10: (y1 * in_w + x0) as u32,
                    i11: (y1 * in_w + x1) as u32,
                    fx: sx - x0 as f64,
                    fy: sy - y0 as f64,
                });
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    /// Resize map with pixel-center alignment (`src = (dst + 0.5)·in/out − 0.5`).
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        Self::from_fn(in_h, in_w, out_h, out_w, |r, c| {
            ((c as f64 + 0.5) * sx - 0.5, (r as f64 + 0.5) * sy - 0.5)
        })
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Samples one plane. Uses nested lerps so a constant neighbourhood
    /// reproduces its value exactly.
    pub fn apply_plane(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.in_h * self.in_w);
        debug_assert_eq!(dst.len(), self.out_h * self.out_w);
        for (d, t) in dst.iter_mut().zip(&self.taps) {
            let a = src[t.i00 as usize];
            let b = src[t.i01 as usize];
            let c = src[t.i10 as usize];
            let e = src[t.i11 as usize];
            let top = a + t.fx * (b - a);
            let bottom = c + t.fx * (e - c);
            *d = top + t.fy * (bottom - top);
        }
    }

    /// Transpose of [`apply_plane`](Self::apply_plane): scatters output
    /// gradients back onto the input plane (accumulating into `grad_src`).
    pub fn backward_plane(&self, grad_dst: &[f64], grad_src: &mut [f64]) {
        for (g, t) in grad_dst.iter().zip(&self.taps) {
            if *g == 0.0 {
                continue;
            }
            let wx1 = t.fx;
            let wx0 = 1.0 - t.fx;
            let wy1 = t.fy;
            let wy0 = 1.0 - t.fy;
            grad_src[t.i00 as usize] += g * wx0 * wy0;
            grad_src[t.i01 as usize] += g * wx1 * wy0;
            grad_src[t.i10 as usize] += g * wx0 * wy1;
            grad_src[t.i11 as usize] += g * wx1 * wy1;
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        assert_eq!((img.height(), img.width()), (self.in_h, self.in_w));
        let mut out = Image::new(img.channels(), self.out_h, self.out_w);
        for c in 0..img.channels() {
            self.apply_plane(img.plane(c), out.plane_mut(c));
        }
        out
    }

    pub fn backward(&self, grad_out: &Image) -> Image {
        assert_eq!((grad_out.height(), grad_out.width()), (self.out_h, self.out_w));
        let mut grad_in = Image::new(grad_out.channels(), self.in_h, self.in_w);
        for c in 0..grad_out.channels() {
            self.backward_plane(grad_out.plane(c), grad_in.plane_mut(c));
        }
        grad_in
    }
}
