//! Raster domain types: grayscale images, integer label maps, and dense
//! displacement fields, plus the resize/pad/normalize preprocessing chain.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Single-channel raster with values nominally in [0,1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "image data length mismatch");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for &v in &self.data {
            mn = mn.min(v);
            mx = mx.max(v);
        }
        (mn, mx)
    }

    /// [1,H,W] tensor view for the autodiff graph.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert!(s.len() == 3 && s[0] == 1, "expected [1,H,W] tensor");
        Self { height: s[1], width: s[2], data: t.data().to_vec() }
    }

    /// Quantize intensities to 16-bit levels (k/65535). Generated datasets
    /// pass through this so that PNG export round-trips bit-exactly.
    pub fn quantize_u16(&mut self) {
        for v in &mut self.data {
            *v = (*v * 65535.0).round().clamp(0.0, 65535.0) / 65535.0;
        }
    }
}

/// Integer segmentation map; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap2D {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl LabelMap2D {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "label data length mismatch");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Distinct nonzero labels, ascending.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Dense per-pixel displacement, stored as two planes (u_x then u_y) in
/// pixel units. The warp convention is output(p) = input(p + u(p)).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField2D {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl DisplacementField2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 2 * height * width, "field data length mismatch");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 2 * height * width] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn ux(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn uy(&self) -> &[f64] {
        &self.data[self.height * self.width..]
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    pub fn set_at(&mut self, y: usize, x: usize, ux: f64, uy: f64) {
        let i = y * self.width + x;
        self.data[i] = ux;
        self.data[self.height * self.width + i] = uy;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f64 {
        let hw = self.height * self.width;
        let mut m: f64 = 0.0;
        for i in 0..hw {
            m = m.max((self.data[i].powi(2) + self.data[hw + i].powi(2)).sqrt());
        }
        m
    }

    /// [2,H,W] tensor view for the autodiff graph.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[2, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert!(s.len() == 3 && s[0] == 2, "expected [2,H,W] tensor");
        Self { height: s[1], width: s[2], data: t.data().to_vec() }
    }
}

/// Bilinear resize with half-pixel center mapping.
pub fn resize_bilinear(img: &Image2D, out_h: usize, out_w: usize) -> Image2D {
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let mut out = Image2D::zeros(out_h, out_w);
    for y in 0..out_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            let (idx, wts, _, _) =
                crate::tensor::bilinear_stencil(img.height, img.width, src_y, src_x);
            let mut v = 0.0;
            for q in 0..4 {
                v += wts[q] * img.data()[idx[q]];
            }
            out.set(y, x, v);
        }
    }
    out
}

/// Nearest-neighbor resize for label maps; every output value is one of the
/// input values.
pub fn resize_nearest_labels(labels: &LabelMap2D, out_h: usize, out_w: usize) -> LabelMap2D {
    let sy = labels.height as f64 / out_h as f64;
    let sx = labels.width as f64 / out_w as f64;
    let mut out = LabelMap2D::zeros(out_h, out_w);
    for y in 0..out_h {
        let src_y =
            (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(labels.height - 1);
        for x in 0..out_w {
            let src_x =
                (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(labels.width - 1);
            out.set(y, x, labels.get(src_y, src_x));
        }
    }
    out
}

/// Zero-pad to (out_h, out_w), split as evenly as possible with the extra
/// pixel on the bottom/right.
pub fn pad_to(img: &Image2D, out_h: usize, out_w: usize) -> Image2D {
    assert!(out_h >= img.height && out_w >= img.width, "pad target smaller than image");
    let top = (out_h - img.height) / 2;
    let left = (out_w - img.width) / 2;
    let mut out = Image2D::zeros(out_h, out_w);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(y + top, x + left, img.get(y, x));
        }
    }
    out
}

pub fn pad_labels_to(labels: &LabelMap2D, out_h: usize, out_w: usize) -> LabelMap2D {
    assert!(out_h >= labels.height && out_w >= labels.width);
    let top = (out_h - labels.height) / 2;
    let left = (out_w - labels.width) / 2;
    let mut out = LabelMap2D::zeros(out_h, out_w);
    for y in 0..labels.height {
        for x in 0..labels.width {
            out.set(y + top, x + left, labels.get(y, x));
        }
    }
    out
}

/// Min-max normalization to [0,1]; a constant image maps to all zeros.
pub fn minmax_normalize(img: &Image2D) -> Image2D {
    let (mn, mx) = img.min_max();
    let range = mx - mn;
    if range <= 0.0 {
        return Image2D::zeros(img.height, img.width);
    }
    Image2D::new(img.height, img.width, img.data().iter().map(|v| (v - mn) / range).collect())
}

/// Geometry targets for [`preprocess`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessSpec {
    /// Side length of the bilinear resize step.
    pub resize_to: usize,
    /// Final padded side length.
    pub pad_to: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self { resize_to: 112, pad_to: 128 }
    }
}

/// Resize to `resize_to`, min-max normalize, and zero-pad to `pad_to`.
///
/// Inputs already at the padded size are only re-normalized, which makes the
/// function idempotent on its own outputs.
pub fn preprocess(raw: &Image2D, spec: PreprocessSpec) -> Result<Image2D> {
    if raw.height == 0 || raw.width == 0 {
        return Err(CoreError::invalid("preprocess: empty image"));
    }
    if !raw.all_finite() {
        return Err(CoreError::data("preprocess: non-finite input values"));
    }
    if raw.height == spec.pad_to && raw.width == spec.pad_to {
        return Ok(minmax_normalize(raw));
    }
    let resized = resize_bilinear(raw, spec.resize_to, spec.resize_to);
    let normalized = minmax_normalize(&resized);
    Ok(pad_to(&normalized, spec.pad_to, spec.pad_to))
}

/// Label-map counterpart of [`preprocess`]: nearest-neighbor resize and the
/// same padding placement.
pub fn preprocess_labels(raw: &LabelMap2D, spec: PreprocessSpec) -> LabelMap2D {
    if raw.height == spec.pad_to && raw.width == spec.pad_to {
        return raw.clone();
    }
    let resized = resize_nearest_labels(raw, spec.resize_to, spec.resize_to);
    pad_labels_to(&resized, spec.pad_to, spec.pad_to)
}
