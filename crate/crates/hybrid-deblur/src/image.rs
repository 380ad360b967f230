//! Image container, homography warps, resampling and quality metrics.
//!
//! Pixel values are linear-light `f32` samples stored row-major and
//! interleaved per pixel. Every image carries a per-pixel validity mask;
//! pixels that fall outside a warp source or a resampling footprint are
//! masked off and excluded from all metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the SSIM window.
const SSIM_WINDOW: usize = 11;
/// Standard deviation of the SSIM window.
const SSIM_SIGMA: f64 = 1.5;
/// PSNR returned for a zero-MSE pair, and the cap applied to finite values.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyDimensions(usize, usize),
    #[error("channel count must be 1 or 3, got {0}")]
    BadChannelCount(usize),
    #[error("sample buffer holds {got} values, expected {expected}")]
    SampleCountMismatch { got: usize, expected: usize },
    #[error("mask holds {got} entries, expected {expected}")]
    MaskLengthMismatch { got: usize, expected: usize },
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("shape mismatch: {0}x{1}x{2} vs {3}x{4}x{5}")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize),
    #[error("resampling factor must be >= 1")]
    BadFactor,
    #[error("images share no jointly valid pixels")]
    NoValidPixels,
    #[error("image {0}x{1} is smaller than the {2}x{2} metric window")]
    SmallerThanWindow(usize, usize, usize),
    #[error("homography is not invertible (|det| = {0:.3e})")]
    SingularHomography(f64),
    #[error("homography bottom-right entry is too close to zero ({0:.3e})")]
    UnnormalizableHomography(f64),
}

// ---------------------------------------------------------------------------
// Image
// ---------------------------------------------------------------------------

/// A 1- or 3-channel float image with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
    mask: Vec<bool>,
}

impl Image {
    /// Builds a fully valid image from interleaved row-major samples.
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        samples: Vec<f32>,
    ) -> Result<Self, ImageError> {
        let mask = vec![true; width * height];
        Self::with_mask(width, height, channels, samples, mask)
    }

    /// Builds an image with an explicit validity mask.
    pub fn with_mask(
        width: usize,
        height: usize,
        channels: usize,
        samples: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions(width, height));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannelCount(channels));
        }
        let expected = width * height * channels;
        if samples.len() != expected {
            return Err(ImageError::SampleCountMismatch { got: samples.len(), expected });
        }
        if mask.len() != width * height {
            return Err(ImageError::MaskLengthMismatch { got: mask.len(), expected: width * height });
        }
        if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFiniteSample(bad));
        }
        Ok(Self { width, height, channels, samples, mask })
    }

    /// A fully valid image where every sample is `value`.
    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("constant image construction")
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::constant(width, height, channels, 0.0)
    }

    /// Builds a fully valid image by evaluating `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut samples = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, samples).expect("from_fn image construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.samples[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        let i = self.index(x, y, c);
        self.samples[i] = value;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn set_valid(&mut self, x: usize, y: usize, valid: bool) {
        self.mask[y * self.width + x] = valid;
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn fully_valid(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mean over all samples of valid pixels, in f64.
    pub fn mean(&self) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.is_valid(x, y) {
                    continue;
                }
                for c in 0..self.channels {
                    sum += self.get(x, y, c) as f64;
                }
                n += self.channels;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Applies `f` to every sample, keeping the mask.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Image {
        let samples = self.samples.iter().map(|&v| f(v)).collect();
        Image::with_mask(self.width, self.height, self.channels, samples, self.mask.clone())
            .expect("map preserves shape")
    }

    /// Rec. 601 luminance; single-channel images are returned as-is.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut samples = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let r = self.get(x, y, 0);
                let g = self.get(x, y, 1);
                let b = self.get(x, y, 2);
                samples.push(0.299 * r + 0.587 * g + 0.114 * b);
            }
        }
        Image::with_mask(self.width, self.height, 1, samples, self.mask.clone())
            .expect("luma preserves shape")
    }

    /// Bilinear sample at a fractional position on the integer pixel grid.
    ///
    /// Returns `None` outside `[0, w-1] x [0, h-1]`. The second field is
    /// false when any tap with nonzero weight is masked off.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> Option<(f32, bool)> {
        if !(x >= 0.0 && x <= (self.width - 1) as f64 && y >= 0.0 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = x.floor().min((self.width - 1) as f64) as usize;
        let y0 = y.floor().min((self.height - 1) as f64) as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);

        let mut value = 0.0f64;
        let mut valid = true;
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        for (tx, ty, w) in taps {
            if w == 0.0 {
                continue;
            }
            value += w * self.get(tx, ty, c) as f64;
            valid &= self.is_valid(tx, ty);
        }
        Some((value as f32, valid))
    }

    /// Bilinear sample with coordinates clamped to the image bounds,
    /// ignoring the mask. Used where constant edge extension is wanted.
    pub fn sample_bilinear_clamped(&self, x: f64, y: f64, c: usize) -> f32 {
        let cx = x.clamp(0.0, (self.width - 1) as f64);
        let cy = y.clamp(0.0, (self.height - 1) as f64);
        self.sample_bilinear(cx, cy, c).map(|(v, _)| v).expect("clamped coords in bounds")
    }
}

// ---------------------------------------------------------------------------
// Homography
// ---------------------------------------------------------------------------

/// A 3x3 projective transform on pixel coordinates.
///
/// Always normalized so the bottom-right entry is exactly 1, and always
/// invertible; both properties are enforced at construction and preserved
/// by composition and inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Normalizes and validates an arbitrary 3x3 matrix.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, ImageError> {
        let w = m[(2, 2)];
        if w.abs() < 1e-15 || !w.is_finite() {
            return Err(ImageError::UnnormalizableHomography(w));
        }
        let n = m / w;
        let det = n.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(ImageError::SingularHomography(det));
        }
        Ok(Self { m: n })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = dx;
        m[(1, 2)] = dy;
        Self { m }
    }

    /// Similarity transform: scale and rotate about `pivot`, then translate.
    pub fn similarity(pivot: (f64, f64), angle: f64, scale: f64, translation: (f64, f64)) -> Result<Self, ImageError> {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = scale * s;
        let (px, py) = pivot;
        let (tx, ty) = translation;
        // T(pivot + t) * R(angle) * S(scale) * T(-pivot)
        let m = Matrix3::new(
            a, -b, px + tx - a * px + b * py,
            b, a, py + ty - b * px - a * py,
            0.0, 0.0, 1.0,
        );
        Self::from_matrix(m)
    }

    /// Maps full-resolution coordinates onto the grid of a `factor`x
    /// block-average downsample: `p -> (p - (factor-1)/2) / factor`.
    pub fn downscale_map(factor: usize) -> Self {
        let f = factor as f64;
        let o = (f - 1.0) / 2.0;
        let m = Matrix3::new(
            1.0 / f, 0.0, -o / f,
            0.0, 1.0 / f, -o / f,
            0.0, 0.0, 1.0,
        );
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Applies the projective map to a point.
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let v = self.m * Vector3::new(p.0, p.1, 1.0);
        (v.x / v.z, v.y / v.z)
    }

    pub fn inverse(&self) -> Homography {
        let inv = self.m.try_inverse().expect("construction guarantees invertibility");
        Homography::from_matrix(inv).expect("inverse of an invertible homography")
    }

    /// Matrix product `self * other`: the map applying `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        Homography::from_matrix(self.m * other.m).expect("product of invertible homographies")
    }

    /// The same map expressed on `factor`x downsampled grids on both sides:
    /// `S * H * S^-1` with `S` the downscale map.
    pub fn downscaled(&self, factor: usize) -> Homography {
        let s = Homography::downscale_map(factor);
        s.compose(self).compose(&s.inverse())
    }

    /// Serializable row-major form.
    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 3]; 3]) -> Result<Self, ImageError> {
        let m = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2],
            rows[1][0], rows[1][1], rows[1][2],
            rows[2][0], rows[2][1], rows[2][2],
        );
        Self::from_matrix(m)
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(deserializer)?;
        Homography::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Warping and resampling
// ---------------------------------------------------------------------------

/// Inverse warp: `out(p) = img(H * p)` with bilinear sampling.
///
/// Output pixels whose source position leaves the image, or whose sampling
/// stencil touches a masked-off pixel, are masked off (value 0).
pub fn warp_image(img: &Image, h: &Homography, out_width: usize, out_height: usize) -> Image {
    let mut out = Image::zeros(out_width, out_height, img.channels());
    for y in 0..out_height {
        for x in 0..out_width {
            let (sx, sy) = h.apply((x as f64, y as f64));
            let mut ok = true;
            for c in 0..img.channels() {
                match img.sample_bilinear(sx, sy, c) {
                    Some((v, valid)) => {
                        out.set(x, y, c, v);
                        ok &= valid;
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            out.set_valid(x, y, ok);
            if !ok {
                for c in 0..img.channels() {
                    out.set(x, y, c, 0.0);
                }
            }
        }
    }
    out
}

/// Block-average downsample by an integer factor.
///
/// Trailing rows/columns that do not fill a whole block are cropped. An
/// output pixel is valid only if its entire block is valid.
pub fn downsample_avg(img: &Image, factor: usize) -> Result<Image, ImageError> {
    if factor == 0 {
        return Err(ImageError::BadFactor);
    }
    let ow = img.width() / factor;
    let oh = img.height() / factor;
    if ow == 0 || oh == 0 {
        return Err(ImageError::EmptyDimensions(ow, oh));
    }
    let c = img.channels();
    let norm = 1.0 / (factor * factor) as f64;
    let mut samples = Vec::with_capacity(ow * oh * c);
    let mut mask = Vec::with_capacity(ow * oh);
    for by in 0..oh {
        for bx in 0..ow {
            let mut valid = true;
            let mut acc = [0.0f64; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let x = bx * factor + dx;
                    let y = by * factor + dy;
                    valid &= img.is_valid(x, y);
                    for (ch, a) in acc.iter_mut().enumerate().take(c) {
                        *a += img.get(x, y, ch) as f64;
                    }
                }
            }
            for a in acc.iter().take(c) {
                samples.push((a * norm) as f32);
            }
            mask.push(valid);
        }
    }
    Image::with_mask(ow, oh, c, samples, mask)
}

/// Bilinear upsample onto a `out_width x out_height` grid, inverting the
/// coordinate convention of [`downsample_avg`]; edges are clamped.
pub fn upsample_bilinear(img: &Image, factor: usize, out_width: usize, out_height: usize) -> Image {
    let f = factor as f64;
    let o = (f - 1.0) / 2.0;
    Image::from_fn(out_width, out_height, img.channels(), |x, y, c| {
        img.sample_bilinear_clamped((x as f64 - o) / f, (y as f64 - o) / f, c)
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// PSNR in dB over jointly valid pixels, after clipping both inputs to
/// [0, 1]. Identical inputs return the 99 dB cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ImageError> {
    if !a.same_shape(b) {
        return Err(ImageError::ShapeMismatch(
            a.width(), a.height(), a.channels(),
            b.width(), b.height(), b.channels(),
        ));
    }
    let mut se = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !a.is_valid(x, y) || !b.is_valid(x, y) {
                continue;
            }
            for c in 0..a.channels() {
                let va = a.get(x, y, c).clamp(0.0, 1.0) as f64;
                let vb = b.get(x, y, c).clamp(0.0, 1.0) as f64;
                se += (va - vb) * (va - vb);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(ImageError::NoValidPixels);
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5, k1 0.01, k2 0.03,
/// dynamic range 1). RGB inputs are compared on the luminance channel.
/// Windows containing any invalid pixel are skipped.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImageError> {
    if !a.same_shape(b) {
        return Err(ImageError::ShapeMismatch(
            a.width(), a.height(), a.channels(),
            b.width(), b.height(), b.channels(),
        ));
    }
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(ImageError::SmallerThanWindow(a.width(), a.height(), SSIM_WINDOW));
    }
    let la = a.to_luma();
    let lb = b.to_luma();
    let w = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(a.height() - SSIM_WINDOW) {
        'window: for x0 in 0..=(a.width() - SSIM_WINDOW) {
            let mut mx = 0.0f64;
            let mut my = 0.0f64;
            let mut mxx = 0.0f64;
            let mut myy = 0.0f64;
            let mut mxy = 0.0f64;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let x = x0 + dx;
                    let y = y0 + dy;
                    if !la.is_valid(x, y) || !lb.is_valid(x, y) {
                        continue 'window;
                    }
                    let wt = w[dy * SSIM_WINDOW + dx];
                    let va = la.get(x, y, 0) as f64;
                    let vb = lb.get(x, y, 0) as f64;
                    mx += wt * va;
                    my += wt * vb;
                    mxx += wt * va * va;
                    myy += wt * vb * vb;
                    mxy += wt * va * vb;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ImageError::NoValidPixels);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_scene(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| {
            let fx = x as f32 / w as f32;
            let fy = y as f32 / h as f32;
            0.5 + 0.3 * (6.0 * fx).sin() * (5.0 * fy).cos() + 0.1 * fx * fy
        })
    }

    #[test]
    fn image_rejects_bad_shapes() {
        assert!(Image::new(0, 4, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0, f32::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn warp_identity_is_exact() {
        let img = smooth_scene(17, 13);
        let out = warp_image(&img, &Homography::identity(), 17, 13);
        assert_eq!(out, img, "identity warp must reproduce the input bit for bit");
    }

    #[test]
    fn warp_translation_splits_impulse_bilinearly() {
        // Inverse warp by a +2.5 px horizontal translation: the impulse at
        // (8, 4) lands midway between output pixels 5 and 6.
        let mut img = Image::zeros(16, 9, 1);
        img.set(8, 4, 0, 1.0);
        let out = warp_image(&img, &Homography::translation(2.5, 0.0), 16, 9);
        assert!((out.get(5, 4, 0) - 0.5).abs() < 1e-6, "left half, got {}", out.get(5, 4, 0));
        assert!((out.get(6, 4, 0) - 0.5).abs() < 1e-6, "right half, got {}", out.get(6, 4, 0));
        let total: f32 = out.samples().iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "impulse mass must be preserved, got {total}");
    }

    #[test]
    fn warp_out_of_bounds_masks_off() {
        let img = smooth_scene(8, 8);
        let out = warp_image(&img, &Homography::translation(6.0, 0.0), 8, 8);
        assert!(out.is_valid(0, 0));
        assert!(!out.is_valid(2, 0), "source column 8 is past the right edge");
        assert_eq!(out.get(2, 0, 0), 0.0);
    }

    #[test]
    fn warp_composition_matches_single_warp() {
        let img = smooth_scene(64, 48);
        let ha = Homography::similarity((32.0, 24.0), 0.05, 1.02, (1.3, -0.7)).unwrap();
        let hb = Homography::translation(-2.2, 1.8);
        let two_step = warp_image(&warp_image(&img, &ha, 64, 48), &hb, 64, 48);
        let one_step = warp_image(&img, &ha.compose(&hb), 64, 48);
        let mut worst = 0.0f32;
        for y in 0..48 {
            for x in 0..64 {
                if two_step.is_valid(x, y) && one_step.is_valid(x, y) {
                    worst = worst.max((two_step.get(x, y, 0) - one_step.get(x, y, 0)).abs());
                }
            }
        }
        assert!(worst < 1e-3, "two-step vs composed warp differ by {worst}");
    }

    #[test]
    fn homography_rejects_singular_and_unnormalizable() {
        let singular = Matrix3::new(1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Homography::from_matrix(singular).is_err());
        let zero_corner = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(Homography::from_matrix(zero_corner).is_err());
    }

    #[test]
    fn homography_normalization_survives_operations() {
        let h = Homography::from_matrix(Matrix3::new(
            2.0, 0.1, 3.0,
            -0.2, 1.8, -1.0,
            1e-4, -2e-4, 2.0,
        ))
        .unwrap();
        assert!((h.matrix()[(2, 2)] - 1.0).abs() < 1e-15);
        assert!((h.inverse().matrix()[(2, 2)] - 1.0).abs() < 1e-15);
        assert!((h.compose(&h).matrix()[(2, 2)] - 1.0).abs() < 1e-15);
        let round = h.compose(&h.inverse());
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((round.matrix()[(r, c)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn downscaled_homography_commutes_with_scaling() {
        let h = Homography::similarity((100.0, 80.0), 0.03, 0.98, (4.0, -2.5)).unwrap();
        let h6 = h.downscaled(6);
        let s = Homography::downscale_map(6);
        for &p in &[(0.0, 0.0), (37.0, 11.0), (200.5, 159.0)] {
            let a = s.apply(h.apply(p));
            let b = h6.apply(s.apply(p));
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            assert!(d < 1e-9, "scale/warp order mismatch {d} at {p:?}");
        }
    }

    #[test]
    fn downsample_preserves_mean_and_shape() {
        let img = smooth_scene(96, 66);
        let down = downsample_avg(&img, 6).unwrap();
        assert_eq!((down.width(), down.height()), (16, 11));
        assert!((img.mean() - down.mean()).abs() < 1e-6, "block averaging must preserve the mean");
        let identity = downsample_avg(&img, 1).unwrap();
        assert_eq!(identity, img);
    }

    #[test]
    fn downsample_2x2_block_averages() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let down = downsample_avg(&img, 2).unwrap();
        assert_eq!(down.get(0, 0, 0), 0.5);
    }

    #[test]
    fn downsample_crops_partial_blocks() {
        let img = smooth_scene(13, 7);
        let down = downsample_avg(&img, 3).unwrap();
        assert_eq!((down.width(), down.height()), (4, 2));
    }

    #[test]
    fn downsample_masks_partial_blocks_off() {
        let mut img = smooth_scene(8, 8);
        img.set_valid(3, 1, false);
        let down = downsample_avg(&img, 2).unwrap();
        assert!(!down.is_valid(1, 0));
        assert!(down.is_valid(0, 0));
    }

    #[test]
    fn full_resolution_downsample_dims() {
        // The nominal sensor sizes: 6x downsample of a 3840x2160 frame.
        let img = Image::zeros(3840, 2160, 1);
        let down = downsample_avg(&img, 6).unwrap();
        assert_eq!((down.width(), down.height()), (640, 360));
    }

    #[test]
    fn psnr_known_value_and_cap() {
        let zero = Image::zeros(32, 32, 1);
        let tenth = Image::constant(32, 32, 1, 0.1);
        let v = psnr(&zero, &tenth).unwrap();
        assert!((v - 20.0).abs() < 1e-6, "MSE 0.01 must give 20 dB, got {v}");
        assert_eq!(psnr(&zero, &zero).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_is_symmetric_and_monotone_in_noise() {
        use rand::{Rng, SeedableRng};
        let base = smooth_scene(48, 48);
        for seed in 0..10u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let small = base.map(|v| (v + 0.01 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0));
            let big = base.map(|v| (v + 0.2 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0));
            let a = psnr(&base, &small).unwrap();
            let b = psnr(&base, &big).unwrap();
            assert!(a > b, "seed {seed}: more noise must lower PSNR ({a} vs {b})");
            let fwd = psnr(&base, &big).unwrap();
            let rev = psnr(&big, &base).unwrap();
            assert!((fwd - rev).abs() < 1e-12, "PSNR must be symmetric");
        }
    }

    #[test]
    fn psnr_ignores_invalid_pixels() {
        let a = Image::zeros(16, 16, 1);
        let mut b = Image::zeros(16, 16, 1);
        b.set(5, 5, 0, 1.0);
        b.set_valid(5, 5, false);
        assert_eq!(psnr(&a, &b).unwrap(), PSNR_CAP, "the only differing pixel is masked off");
    }

    #[test]
    fn psnr_errors_on_mismatch_and_empty_overlap() {
        let a = Image::zeros(8, 8, 1);
        let b = Image::zeros(8, 9, 1);
        assert!(psnr(&a, &b).is_err());
        let mut c = Image::zeros(8, 8, 1);
        for m in c.mask_mut() {
            *m = false;
        }
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let img = smooth_scene(32, 32);
        let v = ssim(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "SSIM of an image with itself must be 1, got {v}");
    }

    #[test]
    fn ssim_negative_for_anticorrelated_pattern() {
        let a = Image::from_fn(32, 32, 1, |x, y, _| if (x + y) % 2 == 0 { 0.8 } else { 0.2 });
        let b = a.map(|v| 1.0 - v);
        let v = ssim(&a, &b).unwrap();
        assert!(v < 0.0, "inverted checkerboard should give negative SSIM, got {v}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = Image::zeros(10, 10, 1);
        assert!(matches!(ssim(&img, &img), Err(ImageError::SmallerThanWindow(..))));
    }

    #[test]
    fn ssim_noisy_flat_regression() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let clean = Image::constant(64, 64, 1, 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0f64, 0.05).unwrap();
        let noisy = clean.map(|v| (v as f64 + normal.sample(&mut rng)) as f32);
        let v = ssim(&clean, &noisy).unwrap();
        // Deterministic seed; value frozen from the first run of this test.
        assert!((v - 0.28924).abs() < 5e-3, "noisy-flat SSIM drifted: {v}");
    }

    #[test]
    fn upsample_inverts_downsample_grid() {
        // A linear ramp survives block-average + bilinear upsample in the
        // interior because both use the same grid alignment.
        let img = Image::from_fn(36, 36, 1, |x, _, _| x as f32 / 36.0);
        let down = downsample_avg(&img, 6).unwrap();
        let up = upsample_bilinear(&down, 6, 36, 36);
        for x in 6..30 {
            let d = (up.get(x, 18, 0) - img.get(x, 18, 0)).abs();
            assert!(d < 1e-5, "ramp interior mismatch {d} at column {x}");
        }
    }
}
