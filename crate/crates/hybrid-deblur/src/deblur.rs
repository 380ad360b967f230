//! Non-blind deblurring with spatially varying streak kernels.
//!
//! The forward operator drags every source pixel along its kernel polyline
//! (trapezoid-weighted bilinear scatter) so that applying it to a sharp
//! image reproduces the temporal mean the wide camera integrated. Its
//! adjoint gathers with the identical weights, which makes the pair exact
//! up to rounding and lets iterative solvers run without surprises.
//!
//! Near the frame border the model is necessarily incomplete: during the
//! exposure the real camera integrates content that slides in from outside
//! the frame, which no operator over in-frame pixels can express. The
//! operator therefore tracks which observed pixels are fully explained by
//! in-frame streaks; the solvers treat the rest as missing data and mask
//! the unconstrained border band in their output.
//!
//! Two solvers are provided: multiplicative Richardson-Lucy for the
//! Poisson-ish noise of real sensors, and conjugate gradients on a
//! Tikhonov-plus-gradient normal system when a quadratic prior is wanted.

use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::trajectory::{KernelField, KERNEL_TAPS};

/// Polyline samples per kernel segment; the operator integrates
/// `8 * substeps + 1` points across the exposure.
pub const DEFAULT_SUBSTEPS: usize = 4;
/// Default Richardson-Lucy iteration count.
pub const RL_DEFAULT_ITERS: usize = 30;
/// Numerical floor inside Richardson-Lucy ratios.
pub const RL_FLOOR: f64 = 1e-4;
/// Default conjugate-gradient iteration count.
pub const CG_DEFAULT_ITERS: usize = 50;
/// Default Tikhonov weight, calibrated on oracle-kernel captures at noise
/// sigma 0.01 over the grid 1e-4..1e-1.
pub const CG_DEFAULT_LAMBDA: f64 = 1e-2;
/// Safety factor on streak spans when deciding how far border effects reach;
/// absorbs the smooth spatial variation of neighboring kernels.
const VALID_SLACK: f64 = 1.15;
/// Extra margin in pixels for the bilinear splat footprint.
const VALID_PAD: f64 = 2.0;
/// Fraction of a pixel's streak mass that must land on usable observations
/// before Richardson-Lucy updates it; below this the estimate is left alone.
const COVERAGE_FLOOR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DeblurError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image {0}x{1} does not match the {2}x{3} kernel field")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("observation has {0} channels but the initial estimate has {1}")]
    ChannelMismatch(usize, usize),
    #[error("substeps must be positive")]
    BadSubsteps,
    #[error("iteration count must be positive")]
    BadIterations,
    #[error("regularization weight {0} must be finite and nonnegative")]
    BadLambda(f64),
    #[error("conjugate gradients diverged at iteration {iteration}: residual {residual:.3e} vs initial {initial:.3e}")]
    Diverged { iteration: usize, residual: f64, initial: f64 },
}

/// Per-iteration solver diagnostics (negative log-likelihood for
/// Richardson-Lucy, residual norm for conjugate gradients).
#[derive(Debug, Clone, Default)]
pub struct SolverLog {
    pub values: Vec<f64>,
}

/// The spatially varying blur: scatter along per-pixel streaks with
/// per-pixel renormalization so every in-frame source pixel deposits unit
/// mass even when part of its streak leaves the frame. Pixels with invalid
/// kernels pass through untouched.
pub struct BlurOperator<'a> {
    kernels: &'a KernelField,
    samples: usize,
    scale: Vec<f64>,
    observed_valid: Vec<bool>,
    restored_valid: Vec<bool>,
}

impl<'a> BlurOperator<'a> {
    pub fn new(kernels: &'a KernelField, substeps: usize) -> Result<Self, DeblurError> {
        if substeps == 0 {
            return Err(DeblurError::BadSubsteps);
        }
        let samples = 8 * substeps + 1;
        let mut op = Self {
            kernels,
            samples,
            scale: Vec::new(),
            observed_valid: Vec::new(),
            restored_valid: Vec::new(),
        };
        let (w, h) = (kernels.width(), kernels.height());
        let mut scale = vec![1.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !kernels.valid()[idx] {
                    continue;
                }
                let mut mass = 0.0f64;
                op.for_each_sample(x, y, |px, py, wgt| {
                    for_each_splat_tap(px, py, w, h, |_, tw| {
                        mass += wgt * tw;
                    });
                });
                scale[idx] = if mass > 1e-12 { 1.0 / mass } else { 0.0 };
            }
        }
        op.scale = scale;
        op.observed_valid = op.compute_observed_valid();
        op.restored_valid = op.compute_restored_valid();
        Ok(op)
    }

    /// An observation is fully explained by in-frame streaks when every
    /// source that can reach it, and every streak of such a source, stays
    /// inside the frame. Both conditions hold once the pixel is farther
    /// from each border than the local streak span (with slack for kernel
    /// variation and the splat footprint).
    fn compute_observed_valid(&self) -> Vec<bool> {
        let (w, h) = (self.kernels.width(), self.kernels.height());
        let mut valid = vec![true; w * h];
        let mut taps = Vec::with_capacity(KernelField::TAP_COUNT);
        for k in 0..KernelField::TAP_COUNT {
            taps.push(self.kernels.tap(k));
        }
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !self.kernels.valid()[idx] {
                    continue;
                }
                let (mut dx_min, mut dx_max) = (f64::INFINITY, f64::NEG_INFINITY);
                let (mut dy_min, mut dy_max) = (f64::INFINITY, f64::NEG_INFINITY);
                for (dx, dy) in &taps {
                    dx_min = dx_min.min(dx[idx] as f64);
                    dx_max = dx_max.max(dx[idx] as f64);
                    dy_min = dy_min.min(dy[idx] as f64);
                    dy_max = dy_max.max(dy[idx] as f64);
                }
                if dx_min == 0.0 && dx_max == 0.0 && dy_min == 0.0 && dy_max == 0.0 {
                    // An exactly zero kernel is the identity; nothing can
                    // cross the border through it.
                    continue;
                }
                let rx = (dx_max - dx_min) * VALID_SLACK + VALID_PAD;
                let ry = (dy_max - dy_min) * VALID_SLACK + VALID_PAD;
                let (xf, yf) = (x as f64, y as f64);
                valid[idx] = xf - rx >= 0.0
                    && xf + rx <= (w - 1) as f64
                    && yf - ry >= 0.0
                    && yf + ry <= (h - 1) as f64;
            }
        }
        valid
    }

    /// A source pixel is well constrained when its entire streak lands on
    /// fully explained observations; only there can a solver recover it.
    fn compute_restored_valid(&self) -> Vec<bool> {
        let (w, h) = (self.kernels.width(), self.kernels.height());
        let observed = &self.observed_valid;
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !self.kernels.valid()[idx] {
                    valid[idx] = observed[idx];
                    continue;
                }
                let mut ok = true;
                self.for_each_sample(x, y, |px, py, _| {
                    let mut landed = false;
                    for_each_splat_tap(px, py, w, h, |tap, _| {
                        landed = true;
                        if !observed[tap] {
                            ok = false;
                        }
                    });
                    if !landed {
                        ok = false;
                    }
                });
                valid[idx] = ok;
            }
        }
        valid
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    pub fn kernels(&self) -> &KernelField {
        &self.kernels
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Observed pixels the operator models exactly (no unseen content from
    /// outside the frame, no renormalized partial streaks).
    pub fn observed_valid(&self) -> &[bool] {
        &self.observed_valid
    }

    /// Source pixels a solver can trust in its output.
    pub fn restored_valid(&self) -> &[bool] {
        &self.restored_valid
    }

    /// Enumerates the streak sample positions and trapezoid weights of one
    /// pixel. Both `apply` and `apply_adjoint` walk exactly this list,
    /// which is what makes them exact adjoints of each other.
    fn for_each_sample(&self, x: usize, y: usize, mut f: impl FnMut(f64, f64, f64)) {
        let m = self.samples;
        let idx = y * self.kernels.width() + x;
        let mut taps = [(0.0f64, 0.0f64); 9];
        for (k, tap) in taps.iter_mut().enumerate() {
            let (dx, dy) = self.kernels.tap(k);
            *tap = (dx[idx] as f64, dy[idx] as f64);
        }
        let denom = (m - 1) as f64;
        for j in 0..m {
            let t8 = j as f64 * 8.0 / denom;
            let seg = (t8.floor() as usize).min(KERNEL_TAPS.len() - 2);
            let u = t8 - seg as f64;
            let (ax, ay) = taps[seg];
            let (bx, by) = taps[seg + 1];
            let px = x as f64 + ax + u * (bx - ax);
            let py = y as f64 + ay + u * (by - ay);
            let wgt = if j == 0 || j == m - 1 { 0.5 } else { 1.0 } / denom;
            f(px, py, wgt);
        }
    }

    fn check_shape(&self, img: &Image) -> Result<(), DeblurError> {
        if img.width() != self.kernels.width() || img.height() != self.kernels.height() {
            return Err(DeblurError::ShapeMismatch(
                img.width(),
                img.height(),
                self.kernels.width(),
                self.kernels.height(),
            ));
        }
        Ok(())
    }

    /// Forward blur of one scalar plane.
    pub fn apply_plane(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.kernels.width(), self.kernels.height());
        let mut out = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !self.kernels.valid()[idx] {
                    out[idx] += src[idx];
                    continue;
                }
                let v = src[idx] * self.scale[idx];
                if v == 0.0 {
                    continue;
                }
                self.for_each_sample(x, y, |px, py, wgt| {
                    for_each_splat_tap(px, py, w, h, |tap, tw| {
                        out[tap] += v * wgt * tw;
                    });
                });
            }
        }
        out
    }

    /// Adjoint (gather) of one scalar plane.
    pub fn adjoint_plane(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.kernels.width(), self.kernels.height());
        let mut out = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !self.kernels.valid()[idx] {
                    out[idx] = src[idx];
                    continue;
                }
                let mut acc = 0.0f64;
                self.for_each_sample(x, y, |px, py, wgt| {
                    for_each_splat_tap(px, py, w, h, |tap, tw| {
                        acc += wgt * tw * src[tap];
                    });
                });
                out[idx] = acc * self.scale[idx];
            }
        }
        out
    }

    /// Forward blur of an image; channels share the kernels.
    pub fn apply(&self, img: &Image) -> Result<Image, DeblurError> {
        self.check_shape(img)?;
        let planes = to_planes(img);
        let blurred: Vec<Vec<f64>> = planes.iter().map(|p| self.apply_plane(p)).collect();
        Ok(from_planes(img.width(), img.height(), &blurred))
    }

    /// Adjoint blur of an image.
    pub fn apply_adjoint(&self, img: &Image) -> Result<Image, DeblurError> {
        self.check_shape(img)?;
        let planes = to_planes(img);
        let gathered: Vec<Vec<f64>> = planes.iter().map(|p| self.adjoint_plane(p)).collect();
        Ok(from_planes(img.width(), img.height(), &gathered))
    }
}

/// Bilinear splat stencil: up to four in-frame taps with positive weight.
fn for_each_splat_tap(px: f64, py: f64, w: usize, h: usize, mut f: impl FnMut(usize, f64)) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (tx, ty, tw) in taps {
        if tw > 0.0 && tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
            f(ty as usize * w + tx as usize, tw);
        }
    }
}

fn to_planes(img: &Image) -> Vec<Vec<f64>> {
    let ch = img.channels();
    let n = img.width() * img.height();
    let mut planes = vec![vec![0.0f64; n]; ch];
    for i in 0..n {
        for (c, plane) in planes.iter_mut().enumerate() {
            plane[i] = img.samples()[i * ch + c] as f64;
        }
    }
    planes
}

fn from_planes(w: usize, h: usize, planes: &[Vec<f64>]) -> Image {
    let ch = planes.len();
    let mut samples = vec![0.0f32; w * h * ch];
    for i in 0..w * h {
        for (c, plane) in planes.iter().enumerate() {
            samples[i * ch + c] = plane[i] as f32;
        }
    }
    Image::new(w, h, ch, samples).expect("plane dimensions are consistent")
}

fn from_planes_masked(w: usize, h: usize, planes: &[Vec<f64>], mask: Vec<bool>) -> Image {
    let ch = planes.len();
    let mut samples = vec![0.0f32; w * h * ch];
    for i in 0..w * h {
        for (c, plane) in planes.iter().enumerate() {
            samples[i * ch + c] = plane[i] as f32;
        }
    }
    Image::with_mask(w, h, ch, samples, mask).expect("plane dimensions are consistent")
}

/// Mask over which a solver's estimate is trustworthy: the well-constrained
/// sources that were also valid in the observation.
fn solution_mask(op: &BlurOperator, observed: &Image) -> Vec<bool> {
    op.restored_valid()
        .iter()
        .zip(observed.mask())
        .map(|(&r, &m)| r && m)
        .collect()
}

/// Usable observations: modeled by the operator and valid in the input.
fn data_mask(op: &BlurOperator, observed: &Image) -> Vec<f64> {
    op.observed_valid()
        .iter()
        .zip(observed.mask())
        .map(|(&v, &m)| if v && m { 1.0 } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// Richardson-Lucy
// ---------------------------------------------------------------------------

/// Richardson-Lucy starting from the observation itself, with observations
/// the operator cannot model replaced by the mean of the usable ones so no
/// unmodeled value ever enters the iteration.
pub fn deconvolve_rl(
    op: &BlurOperator,
    observed: &Image,
    iterations: usize,
) -> Result<(Image, SolverLog), DeblurError> {
    op.check_shape(observed)?;
    let usable = data_mask(op, observed);
    let n = usable.len();
    let mut planes = to_planes(observed);
    for plane in planes.iter_mut() {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for i in 0..n {
            if usable[i] == 1.0 {
                sum += plane[i];
                count += 1;
            }
        }
        let fill = if count > 0 { sum / count as f64 } else { 0.5 };
        for i in 0..n {
            if usable[i] == 0.0 {
                plane[i] = fill;
            }
        }
    }
    let initial = from_planes(observed.width(), observed.height(), &planes);
    deconvolve_rl_from(op, observed, &initial, iterations)
}

/// Multiplicative Richardson-Lucy from an explicit starting point.
///
/// Each iteration rescales the estimate by the adjoint of the observed /
/// predicted ratio; ratios and normalizers are floored to keep the
/// iteration finite. Observations the operator cannot model (the border
/// band fed by off-frame content, plus anything masked in the input) are
/// treated as missing: they contribute nothing to the update, and pixels
/// whose streaks have essentially no usable coverage keep their starting
/// value. The log records the Poisson negative log-likelihood over the
/// usable observations; the returned image is masked to the region the
/// data actually constrains.
pub fn deconvolve_rl_from(
    op: &BlurOperator,
    observed: &Image,
    initial: &Image,
    iterations: usize,
) -> Result<(Image, SolverLog), DeblurError> {
    if iterations == 0 {
        return Err(DeblurError::BadIterations);
    }
    op.check_shape(observed)?;
    op.check_shape(initial)?;
    if observed.channels() != initial.channels() {
        return Err(DeblurError::ChannelMismatch(observed.channels(), initial.channels()));
    }
    let (w, h) = (observed.width(), observed.height());
    let n = w * h;
    let obs_planes = to_planes(observed);
    let mut planes = to_planes(initial);
    for plane in planes.iter_mut() {
        for v in plane.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let usable = data_mask(op, observed);
    let norm = op.adjoint_plane(&usable);
    let mut log = SolverLog { values: vec![0.0; iterations] };
    for plane_idx in 0..planes.len() {
        let obs = &obs_planes[plane_idx];
        let x = &mut planes[plane_idx];
        for it in 0..iterations {
            let predicted = op.apply_plane(x);
            let mut nll = 0.0f64;
            let mut ratio = vec![0.0f64; n];
            for i in 0..n {
                if usable[i] == 0.0 {
                    continue;
                }
                let den = predicted[i].max(RL_FLOOR);
                ratio[i] = obs[i] / den;
                nll += predicted[i] - obs[i] * den.ln();
            }
            let correction = op.adjoint_plane(&ratio);
            for i in 0..n {
                if norm[i] > COVERAGE_FLOOR {
                    x[i] *= correction[i] / norm[i];
                }
            }
            log.values[it] += nll;
        }
    }
    let mask = solution_mask(op, observed);
    Ok((from_planes_masked(w, h, &planes, mask), log))
}

// ---------------------------------------------------------------------------
// Conjugate gradients with a quadratic prior
// ---------------------------------------------------------------------------

fn gradient(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx[i] = plane[i + 1] - plane[i];
            }
            if y + 1 < h {
                gy[i] = plane[i + w] - plane[i];
            }
        }
    }
    (gx, gy)
}

fn gradient_adjoint(gx: &[f64], gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = 0.0f64;
            if x + 1 < w {
                v -= gx[i];
            }
            if x > 0 {
                v += gx[i - 1];
            }
            if y + 1 < h {
                v -= gy[i];
            }
            if y > 0 {
                v += gy[i - w];
            }
            out[i] = v;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(A'MA + lambda (I + D'D)) x = A'M b + lambda mu` by conjugate
/// gradients, where `A` is the blur, `D` the forward-difference gradient,
/// and `M` selects the observations the operator actually models (border
/// pixels fed by off-frame content are left out, as is anything masked in
/// the input). `mu` is the per-channel mean of the usable observations: it
/// centers the identity part of the prior there instead of at zero, so the
/// prior damps deviations from the mean rather than uniformly darkening the
/// result. Starts from zero; errors out if the residual norm ever exceeds
/// ten times its initial value. The log records the residual norm per
/// iteration (summed in quadrature over channels); the returned image is
/// masked to the region the data constrains.
pub fn deconvolve_cg(
    op: &BlurOperator,
    observed: &Image,
    lambda: f64,
    iterations: usize,
) -> Result<(Image, SolverLog), DeblurError> {
    if iterations == 0 {
        return Err(DeblurError::BadIterations);
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(DeblurError::BadLambda(lambda));
    }
    op.check_shape(observed)?;
    let (w, h) = (observed.width(), observed.height());
    let n = w * h;
    let obs_planes = to_planes(observed);
    let mut out_planes = Vec::with_capacity(obs_planes.len());
    let mut residual_sq = vec![0.0f64; iterations];
    let mut logged = 0usize;
    let usable = data_mask(op, observed);

    let system = |x: &[f64]| -> Vec<f64> {
        let mut blurred = op.apply_plane(x);
        for i in 0..n {
            blurred[i] *= usable[i];
        }
        let mut y = op.adjoint_plane(&blurred);
        if lambda > 0.0 {
            let (gx, gy) = gradient(x, w, h);
            let reg = gradient_adjoint(&gx, &gy, w, h);
            for i in 0..n {
                y[i] += lambda * (x[i] + reg[i]);
            }
        }
        y
    };

    for obs in &obs_planes {
        let masked_obs: Vec<f64> = obs.iter().zip(&usable).map(|(&v, &m)| v * m).collect();
        let coverage: f64 = usable.iter().sum();
        let mu = if coverage > 0.0 { masked_obs.iter().sum::<f64>() / coverage } else { 0.5 };
        let mut b = op.adjoint_plane(&masked_obs);
        if lambda > 0.0 {
            for v in b.iter_mut() {
                *v += lambda * mu;
            }
        }
        let mut x = vec![0.0f64; n];
        let mut r = b;
        let mut d = r.clone();
        let mut rs = dot(&r, &r);
        let r0 = rs.sqrt();
        for it in 0..iterations {
            if rs == 0.0 {
                break;
            }
            let q = system(&d);
            let dq = dot(&d, &q);
            if dq <= 0.0 {
                break;
            }
            let alpha = rs / dq;
            for i in 0..n {
                x[i] += alpha * d[i];
                r[i] -= alpha * q[i];
            }
            let rs_new = dot(&r, &r);
            let rnorm = rs_new.sqrt();
            residual_sq[it] += rs_new;
            logged = logged.max(it + 1);
            if rnorm > 10.0 * r0 {
                return Err(DeblurError::Diverged { iteration: it, residual: rnorm, initial: r0 });
            }
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..n {
                d[i] = r[i] + beta * d[i];
            }
        }
        out_planes.push(x);
    }
    residual_sq.truncate(logged.max(1));
    let log = SolverLog { values: residual_sq.into_iter().map(f64::sqrt).collect() };
    let mask = solution_mask(op, observed);
    Ok((from_planes_masked(w, h, &out_planes, mask), log))
}
