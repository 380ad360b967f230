//! Dense optical flow and flow-field algebra.
//!
//! The estimator is pyramidal Lucas-Kanade with a per-pixel translational
//! model: coarse-to-fine over box-downsampled levels, a fixed structure
//! tensor per level, and iterative refinement against bilinearly sampled
//! target values. It is deliberately simple, fully deterministic, and
//! accurate to a fraction of a pixel on the small inter-frame motions the
//! burst camera produces.

use thiserror::Error;

use crate::image::{downsample_avg, Homography, Image, ImageError};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("flow inputs must share dimensions: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {width}x{height} is smaller than the {side}x{side} matching window")]
    TooSmall { width: usize, height: usize, side: usize },
    #[error("flow parameters: {0}")]
    BadParams(String),
}

/// Settings of the pyramidal estimator.
#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    /// Pyramid levels (level 0 is full resolution). Automatically reduced
    /// when the coarsest level would be smaller than the window.
    pub levels: usize,
    /// Half-width of the square matching window.
    pub window_radius: usize,
    /// Refinement iterations per level.
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { levels: 4, window_radius: 7, iterations: 10 }
    }
}

impl FlowParams {
    fn validate(&self) -> Result<(), FlowError> {
        if self.levels == 0 || self.window_radius == 0 || self.iterations == 0 {
            return Err(FlowError::BadParams(
                "levels, window_radius and iterations must all be positive".into(),
            ));
        }
        Ok(())
    }

    fn window_side(&self) -> usize {
        2 * self.window_radius + 1
    }
}

/// A dense displacement field with per-pixel confidence in [0, 1].
///
/// `dx`/`dy` say where each source pixel moves to: a point `p` in the
/// source corresponds to `p + (dx, dy)` in the target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub confidence: Vec<f32>,
}

impl FlowField {
    pub fn constant(width: usize, height: usize, dx: f32, dy: f32, confidence: f32) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![dx; n],
            dy: vec![dy; n],
            confidence: vec![confidence; n],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0, 1.0)
    }

    /// The displacement field of a homography: `h(p) - p` at every pixel.
    pub fn from_homography(h: &Homography, width: usize, height: usize) -> Self {
        let mut f = Self::constant(width, height, 0.0, 0.0, 1.0);
        for y in 0..height {
            for x in 0..width {
                let p = h.apply((x as f64, y as f64));
                f.dx[y * width + x] = (p.0 - x as f64) as f32;
                f.dy[y * width + x] = (p.1 - y as f64) as f32;
            }
        }
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    /// Bilinear sample at a continuous position. Coordinates are clamped to
    /// the field, and the returned confidence is forced to zero when the
    /// query point lies outside it.
    pub fn sample_clamped(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let inside = x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64;
        let cx = x.clamp(0.0, (self.width - 1) as f64);
        let cy = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = cx.floor().min((self.width - 1) as f64);
        let y0 = cy.floor().min((self.height - 1) as f64);
        let fx = cx - x0;
        let fy = cy - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let lerp = |plane: &[f32]| -> f64 {
            let a = plane[y0 * self.width + x0] as f64;
            let b = plane[y0 * self.width + x1] as f64;
            let c = plane[y1 * self.width + x0] as f64;
            let d = plane[y1 * self.width + x1] as f64;
            (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
        };
        let conf = if inside { lerp(&self.confidence) } else { 0.0 };
        (lerp(&self.dx), lerp(&self.dy), conf)
    }
}

/// Chains two displacement fields: the result takes a point through
/// `first` and then through `second`, so it maps A-coordinates all the way
/// to C when `first` is A-to-B and `second` is B-to-C.
///
/// The second field is sampled bilinearly at the arrival point of the
/// first; samples falling outside it keep the clamped displacement but get
/// zero confidence. Elsewhere the confidence is the minimum of the two
/// stages.
pub fn compose_flows(first: &FlowField, second: &FlowField) -> Result<FlowField, FlowError> {
    if !first.same_shape(second) {
        return Err(FlowError::ShapeMismatch(
            first.width(),
            first.height(),
            second.width(),
            second.height(),
        ));
    }
    let (w, h) = (first.width(), first.height());
    let mut out = FlowField::constant(w, h, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx1, dy1) = (first.dx[i] as f64, first.dy[i] as f64);
            let (dx2, dy2, c2) = second.sample_clamped(x as f64 + dx1, y as f64 + dy1);
            out.dx[i] = (dx1 + dx2) as f32;
            out.dy[i] = (dy1 + dy2) as f32;
            out.confidence[i] = (first.confidence[i] as f64).min(c2) as f32;
        }
    }
    Ok(out)
}

fn luma_plane(img: &Image) -> Vec<f32> {
    if img.channels() == 1 {
        img.samples().to_vec()
    } else {
        img.to_luma().samples().to_vec()
    }
}

/// Central-difference gradients, zeroed wherever the stencil touches a
/// masked-off pixel so invalid samples never leak into the normal
/// equations. The returned flags mark the pixels whose gradients are real.
fn gradients(plane: &[f32], mask: &[bool], w: usize, h: usize) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
    let mut gx = vec![0.0f32; w * h];
    let mut gy = vec![0.0f32; w * h];
    let mut ok = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let usable = mask[y * w + x]
                && mask[y * w + xl]
                && mask[y * w + xr]
                && mask[yu * w + x]
                && mask[yd * w + x];
            if !usable {
                continue;
            }
            ok[y * w + x] = true;
            gx[y * w + x] = 0.5 * (plane[y * w + xr] - plane[y * w + xl]);
            gy[y * w + x] = 0.5 * (plane[yd * w + x] - plane[yu * w + x]);
        }
    }
    (gx, gy, ok)
}

fn sample_plane_clamped(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let a = plane[y0 * w + x0] as f64;
    let b = plane[y0 * w + x1] as f64;
    let c = plane[y1 * w + x0] as f64;
    let d = plane[y1 * w + x1] as f64;
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

fn min_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let half_tr = 0.5 * (a + c);
    let det_term = (0.5 * (a - c)).powi(2) + b * b;
    half_tr - det_term.sqrt()
}

/// Upsamples a flow field to double resolution, scaling displacements by 2.
fn upsample_flow(f: &FlowField, out_w: usize, out_h: usize) -> FlowField {
    let mut out = FlowField::constant(out_w, out_h, 0.0, 0.0, 0.0);
    for y in 0..out_h {
        for x in 0..out_w {
            // Inverse of 2x box downsampling: fine pixel centers sit a
            // quarter pixel off the coarse grid.
            let sx = x as f64 / 2.0 - 0.25;
            let sy = y as f64 / 2.0 - 0.25;
            let (dx, dy, _) = f.sample_clamped(sx, sy);
            let i = y * out_w + x;
            out.dx[i] = (2.0 * dx) as f32;
            out.dy[i] = (2.0 * dy) as f32;
        }
    }
    out
}

struct Level {
    w: usize,
    h: usize,
    src: Vec<f32>,
    dst: Vec<f32>,
    src_ok: Vec<bool>,
    // 0/1 validity plane of the target, absent when it is fully valid.
    dst_ok: Option<Vec<f32>>,
    gx: Vec<f32>,
    gy: Vec<f32>,
    // Windowed structure tensor of the source.
    gxx: Vec<f64>,
    gxy: Vec<f64>,
    gyy: Vec<f64>,
    counts: Vec<f64>,
}

impl Level {
    fn build(src: &Image, dst: &Image, radius: usize) -> Self {
        let (w, h) = (src.width(), src.height());
        let sp = luma_plane(src);
        let dp = luma_plane(dst);
        let src_ok = src.mask().to_vec();
        let dst_ok = if dst.fully_valid() {
            None
        } else {
            Some(dst.mask().iter().map(|&m| if m { 1.0f32 } else { 0.0 }).collect())
        };
        let (gx, gy, grad_ok) = gradients(&sp, src.mask(), w, h);
        let r = radius as isize;
        let mut gxx = vec![0.0f64; w * h];
        let mut gxy = vec![0.0f64; w * h];
        let mut gyy = vec![0.0f64; w * h];
        let mut counts = vec![0.0f64; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sxx = 0.0f64;
                let mut sxy = 0.0f64;
                let mut syy = 0.0f64;
                let mut n = 0.0f64;
                for wy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for wx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        let i = wy as usize * w + wx as usize;
                        if !grad_ok[i] {
                            continue;
                        }
                        let (px, py) = (gx[i] as f64, gy[i] as f64);
                        sxx += px * px;
                        sxy += px * py;
                        syy += py * py;
                        n += 1.0;
                    }
                }
                let i = y as usize * w + x as usize;
                gxx[i] = sxx;
                gxy[i] = sxy;
                gyy[i] = syy;
                counts[i] = n;
            }
        }
        Self { w, h, src: sp, dst: dp, src_ok, dst_ok, gx, gy, gxx, gxy, gyy, counts }
    }

    fn refine(&self, flow: &mut FlowField, radius: usize, iterations: usize) {
        let r = radius as isize;
        let (w, h) = (self.w, self.h);
        for _ in 0..iterations {
            let mut moved = false;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let i = y as usize * w + x as usize;
                    if !self.src_ok[i] {
                        continue;
                    }
                    let (a, b, c) = (self.gxx[i], self.gxy[i], self.gyy[i]);
                    if min_eigenvalue(a, b, c) < 1e-10 {
                        continue;
                    }
                    let det = a * c - b * b;
                    if det.abs() < 1e-300 {
                        continue;
                    }
                    let (vx, vy) = (flow.dx[i] as f64, flow.dy[i] as f64);
                    let mut bx = 0.0f64;
                    let mut by = 0.0f64;
                    for wy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                        for wx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                            let j = wy as usize * w + wx as usize;
                            if self.gx[j] == 0.0 && self.gy[j] == 0.0 {
                                continue;
                            }
                            if let Some(ok) = &self.dst_ok {
                                let hit = sample_plane_clamped(
                                    ok,
                                    w,
                                    h,
                                    wx as f64 + vx,
                                    wy as f64 + vy,
                                );
                                if hit < 0.999 {
                                    continue;
                                }
                            }
                            let moved_val = sample_plane_clamped(
                                &self.dst,
                                w,
                                h,
                                wx as f64 + vx,
                                wy as f64 + vy,
                            );
                            let diff = self.src[j] as f64 - moved_val;
                            bx += self.gx[j] as f64 * diff;
                            by += self.gy[j] as f64 * diff;
                        }
                    }
                    let mut ux = (c * bx - b * by) / det;
                    let mut uy = (a * by - b * bx) / det;
                    let mag = (ux * ux + uy * uy).sqrt();
                    let cap = radius as f64;
                    if mag > cap {
                        ux *= cap / mag;
                        uy *= cap / mag;
                    }
                    flow.dx[i] = (vx + ux) as f32;
                    flow.dy[i] = (vy + uy) as f32;
                    if mag > 1e-3 {
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }

    /// Confidence from the window-normalized structure tensor, zeroed at
    /// masked-off source pixels and where the flow points at invalid or
    /// out-of-bounds target pixels.
    fn confidence(&self, flow: &mut FlowField, dst_img: &Image) {
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                let n = self.counts[i].max(1.0);
                let lam = min_eigenvalue(self.gxx[i] / n, self.gxy[i] / n, self.gyy[i] / n).max(0.0);
                let mut conf = lam / (lam + 1e-4);
                if !self.src_ok[i] {
                    conf = 0.0;
                }
                let tx = x as f64 + flow.dx[i] as f64;
                let ty = y as f64 + flow.dy[i] as f64;
                match dst_img.sample_bilinear(tx, ty, 0) {
                    Some((_, valid)) if valid => {}
                    _ => conf = 0.0,
                }
                flow.confidence[i] = conf as f32;
            }
        }
    }
}

/// Estimates the dense flow that takes `src` pixels to their positions in
/// `dst`, i.e. `dst(p + flow(p)) ~= src(p)`.
///
/// Masked-off pixels in either image are excluded from the matching, so a
/// partially valid input (e.g. a deconvolved image with an unusable border
/// band) yields near-zero flow and zero confidence over the invalid region
/// instead of spurious displacements.
pub fn estimate_flow(src: &Image, dst: &Image, params: &FlowParams) -> Result<FlowField, FlowError> {
    params.validate()?;
    if src.width() != dst.width() || src.height() != dst.height() {
        return Err(FlowError::ShapeMismatch(src.width(), src.height(), dst.width(), dst.height()));
    }
    let side = params.window_side();
    if src.width() < side || src.height() < side {
        return Err(FlowError::TooSmall { width: src.width(), height: src.height(), side });
    }

    // Clamp the pyramid so the coarsest level still fits the window.
    let mut levels = 1usize;
    while levels < params.levels
        && (src.width() >> levels) >= side
        && (src.height() >> levels) >= side
    {
        levels += 1;
    }

    let mut src_pyr = vec![src.clone()];
    let mut dst_pyr = vec![dst.clone()];
    for k in 1..levels {
        src_pyr.push(downsample_avg(&src_pyr[k - 1], 2)?);
        dst_pyr.push(downsample_avg(&dst_pyr[k - 1], 2)?);
    }

    let coarsest = levels - 1;
    let mut flow = FlowField::zeros(src_pyr[coarsest].width(), src_pyr[coarsest].height());
    for k in (0..levels).rev() {
        let level = Level::build(&src_pyr[k], &dst_pyr[k], params.window_radius);
        if k != coarsest {
            flow = upsample_flow(&flow, level.w, level.h);
        }
        level.refine(&mut flow, params.window_radius, params.iterations);
        if k == 0 {
            let dst_luma = if dst.channels() == 1 { dst.clone() } else { dst.to_luma() };
            level.confidence(&mut flow, &dst_luma);
        }
    }
    Ok(flow)
}
