//! Synthetic capture generation for the two-camera rig.
//!
//! A capture is a textured plane animated by a [`MotionScript`]. The wide
//! camera integrates the moving scene over its long exposure while the
//! burst camera grabs short, effectively instantaneous frames at 60 FPS
//! through the plane homography of the rig. Because everything derives
//! from the script in closed form, every downstream estimate (alignment,
//! flow, trajectories, blur kernels) can be checked against exact oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{plane_homography, AlignError, CameraRig, Extrinsic};
use crate::flow::FlowField;
use crate::image::{warp_image, Homography, Image, ImageError};
use crate::trajectory::{center_index, KernelField, TrajectoryField, KERNEL_TAPS};

/// Sub-frame renders per nominal video frame when integrating the wide
/// exposure.
pub const WIDE_SUPERSAMPLE: usize = 4;
/// Captures whose consecutive 30 FPS frames move more than this many wide
/// pixels anywhere in the frame are rejected by the generator.
pub const MAX_FRAME_STEP_PX: f64 = 36.0;
/// Nominal video frame interval of the wide camera, seconds.
pub const WIDE_FRAME_DT: f64 = 1.0 / 30.0;
/// Burst frame interval (60 FPS), seconds.
pub const BURST_FRAME_DT: f64 = 1.0 / 60.0;
/// Longest permitted burst frame exposure, seconds.
pub const BURST_MAX_EXPOSURE: f64 = 1.0 / 120.0;
/// Wide exposure bounds, seconds.
pub const WIDE_EXPOSURE_RANGE: (f64, f64) = (1.0 / 15.0, 0.5);
/// Permitted burst lengths.
pub const BURST_FRAME_RANGE: (usize, usize) = (5, 14);

const EPS: f64 = 1e-9;

const STREAM_WIDE_NOISE: u64 = 0x57494445;
const STREAM_BURST_NOISE: u64 = 0x42555253;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("motion script: {0}")]
    BadScript(String),
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("noise parameters must be nonnegative (shot {shot}, read {read})")]
    BadNoise { shot: f64, read: f64 },
    #[error("subframe count must be odd and >= 5, got {0}")]
    BadSubframes(usize),
    #[error("could not draw a script within the {MAX_FRAME_STEP_PX} px/frame motion budget")]
    MotionTooFast,
}

// ---------------------------------------------------------------------------
// Motion scripts
// ---------------------------------------------------------------------------

/// One control point of a motion script.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionKey {
    pub time: f64,
    /// Wide-pixel translation of the scene.
    pub translation: [f64; 2],
    /// Rotation about the pivot, radians.
    pub rotation: f64,
    /// Isotropic scale about the pivot.
    pub scale: f64,
}

/// Piecewise-linear in-plane motion: translation, rotation and scale keys
/// interpolated over time, rotation and scale acting about a fixed pivot
/// in wide pixel coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionScript {
    duration: f64,
    pivot: [f64; 2],
    keys: Vec<MotionKey>,
}

impl MotionScript {
    pub fn new(duration: f64, pivot: [f64; 2], keys: Vec<MotionKey>) -> Result<Self, CaptureError> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(CaptureError::BadScript(format!("duration {duration} must be positive")));
        }
        if keys.is_empty() {
            return Err(CaptureError::BadScript("need at least one key".into()));
        }
        for k in &keys {
            let finite = k.time.is_finite()
                && k.translation.iter().all(|v| v.is_finite())
                && k.rotation.is_finite()
                && k.scale.is_finite();
            if !finite {
                return Err(CaptureError::BadScript("non-finite key".into()));
            }
            if k.scale < 1e-3 {
                return Err(CaptureError::BadScript(format!(
                    "scale {} at t={} leaves the pose non-invertible",
                    k.scale, k.time
                )));
            }
        }
        for pair in keys.windows(2) {
            if !(pair[0].time < pair[1].time) {
                return Err(CaptureError::BadScript("key times must be strictly increasing".into()));
            }
        }
        Ok(Self { duration, pivot, keys })
    }

    /// A script that does not move at all.
    pub fn stationary(duration: f64) -> Self {
        Self::new(
            duration,
            [0.0, 0.0],
            vec![MotionKey { time: 0.0, translation: [0.0, 0.0], rotation: 0.0, scale: 1.0 }],
        )
        .expect("stationary script is valid")
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn keys(&self) -> &[MotionKey] {
        &self.keys
    }

    fn params_at(&self, t: f64) -> ([f64; 2], f64, f64) {
        let keys = &self.keys;
        if t <= keys[0].time || keys.len() == 1 {
            let k = &keys[0];
            return (k.translation, k.rotation, k.scale);
        }
        if t >= keys[keys.len() - 1].time {
            let k = &keys[keys.len() - 1];
            return (k.translation, k.rotation, k.scale);
        }
        let hi = keys.partition_point(|k| k.time <= t).min(keys.len() - 1);
        let (a, b) = (&keys[hi - 1], &keys[hi]);
        let u = (t - a.time) / (b.time - a.time);
        let lerp = |x: f64, y: f64| x + u * (y - x);
        (
            [lerp(a.translation[0], b.translation[0]), lerp(a.translation[1], b.translation[1])],
            lerp(a.rotation, b.rotation),
            lerp(a.scale, b.scale),
        )
    }

    /// The scene pose at time `t`: maps reference wide coordinates to their
    /// wide position at `t`. Continuous in `t` and always invertible.
    pub fn pose(&self, t: f64) -> Homography {
        let (tr, rot, scale) = self.params_at(t);
        Homography::similarity((self.pivot[0], self.pivot[1]), rot, scale, (tr[0], tr[1]))
            .expect("validated keys produce invertible poses")
    }
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Poisson-Gaussian sensor noise: variance `shot * signal + read^2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseParams {
    pub shot: f64,
    pub read: f64,
    /// Sample true Poisson shot noise instead of its Gaussian approximation.
    #[serde(default)]
    pub exact_poisson: bool,
}

impl NoiseParams {
    pub fn none() -> Self {
        Self { shot: 0.0, read: 0.0, exact_poisson: false }
    }

    pub fn gaussian(read: f64) -> Self {
        Self { shot: 0.0, read, exact_poisson: false }
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        if self.shot < 0.0 || self.read < 0.0 || !self.shot.is_finite() || !self.read.is_finite() {
            return Err(CaptureError::BadNoise { shot: self.shot, read: self.read });
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.shot == 0.0 && self.read == 0.0
    }
}

/// Mixes a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adds sensor noise sample-by-sample in row-major order and clips the
/// result to be nonnegative. Deterministic in `(img, params, seed)`.
pub fn add_noise(img: &Image, params: &NoiseParams, seed: u64) -> Image {
    if params.is_noiseless() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut out = img.clone();
    for v in out.samples_mut() {
        let signal = (*v as f64).max(0.0);
        let noisy = if params.exact_poisson && params.shot > 0.0 {
            let photons = if signal > 0.0 {
                Poisson::new(signal / params.shot).expect("positive mean").sample(&mut rng)
            } else {
                0.0
            };
            photons * params.shot + params.read * unit.sample(&mut rng)
        } else {
            let sigma = (params.shot * signal + params.read * params.read).sqrt();
            *v as f64 + sigma * unit.sample(&mut rng)
        };
        *v = noisy.max(0.0) as f32;
    }
    out
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Per-camera noise settings of a capture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureNoise {
    pub wide: NoiseParams,
    pub burst: NoiseParams,
}

/// Everything a processing run may know about a capture: exposure timing
/// of both cameras, rig geometry, plane depth and the noise model. The
/// scene content and its motion are deliberately not part of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureManifest {
    /// `[start, end]` of the wide exposure, seconds.
    pub wide_exposure: (f64, f64),
    /// Per-frame `[start, end]` burst exposure windows, seconds.
    pub burst_windows: Vec<(f64, f64)>,
    pub frames: usize,
    pub wide_dims: (usize, usize),
    pub burst_dims: (usize, usize),
    #[serde(flatten)]
    pub rig: CameraRig,
    /// Scene plane depth in meters.
    pub depth: f64,
    pub noise: CaptureNoise,
}

impl CaptureManifest {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let (ts, te) = self.wide_exposure;
        let fail = |what: String| Err(CaptureError::BadManifest(what));
        if !(ts.is_finite() && te.is_finite() && ts < te) {
            return fail(format!("wide exposure window [{ts}, {te}] is not increasing"));
        }
        let exposure = te - ts;
        if exposure < WIDE_EXPOSURE_RANGE.0 - EPS || exposure > WIDE_EXPOSURE_RANGE.1 + EPS {
            return fail(format!(
                "wide exposure {exposure:.4} s outside [{:.4}, {:.4}]",
                WIDE_EXPOSURE_RANGE.0, WIDE_EXPOSURE_RANGE.1
            ));
        }
        let n = self.burst_windows.len();
        if n != self.frames {
            return fail(format!("frames field {} disagrees with {} windows", self.frames, n));
        }
        if n < BURST_FRAME_RANGE.0 || n > BURST_FRAME_RANGE.1 {
            return fail(format!("{n} burst frames outside {BURST_FRAME_RANGE:?}"));
        }
        for (i, &(s, e)) in self.burst_windows.iter().enumerate() {
            if !(s.is_finite() && e.is_finite() && s < e) {
                return fail(format!("burst window {i} [{s}, {e}] is not increasing"));
            }
            if e - s > BURST_MAX_EXPOSURE + EPS {
                return fail(format!("burst window {i} exceeds the 1/120 s exposure cap"));
            }
            let mid = 0.5 * (s + e);
            if mid < ts - EPS || mid > te + EPS {
                return fail(format!("burst midpoint {i} ({mid:.5}) outside the wide exposure"));
            }
        }
        for (i, pair) in self.burst_windows.windows(2).enumerate() {
            if pair[0].1 > pair[1].0 + EPS {
                return fail(format!("burst windows {i} and {} overlap", i + 1));
            }
        }
        if !(self.depth.is_finite() && self.depth > 0.0) {
            return fail(format!("plane depth {} must be positive", self.depth));
        }
        if self.wide_dims.0 == 0 || self.wide_dims.1 == 0 || self.burst_dims.0 == 0 || self.burst_dims.1 == 0 {
            return fail("zero image dimensions".into());
        }
        self.noise.wide.validate()?;
        self.noise.burst.validate()?;
        Ok(())
    }

    pub fn burst_midpoints(&self) -> Vec<f64> {
        self.burst_windows.iter().map(|&(s, e)| 0.5 * (s + e)).collect()
    }

    /// Midpoint of the temporally central burst frame; trajectory and
    /// kernel displacements are anchored here.
    pub fn anchor_time(&self) -> f64 {
        let mids = self.burst_midpoints();
        mids[center_index(mids.len())]
    }
}

// ---------------------------------------------------------------------------
// Scene and rendering
// ---------------------------------------------------------------------------

/// The textured plane behind a capture. The texture extends past the wide
/// field of view so the burst camera (which sees twice the angle) stays
/// covered; `origin` is the texture coordinate of wide reference pixel
/// (0, 0).
#[derive(Debug, Clone)]
pub struct ScenePlane {
    pub texture: Image,
    pub origin: [f64; 2],
}

impl ScenePlane {
    fn offset(&self) -> Homography {
        Homography::translation(self.origin[0], self.origin[1])
    }
}

/// A burst of short-exposure frames with their exposure windows.
#[derive(Debug, Clone)]
pub struct BurstCapture {
    pub frames: Vec<Image>,
    pub windows: Vec<(f64, f64)>,
}

impl BurstCapture {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn center(&self) -> usize {
        center_index(self.frames.len())
    }
}

/// Wide-camera view of the scene at an instant.
pub fn render_wide_at(scene: &ScenePlane, script: &MotionScript, manifest: &CaptureManifest, t: f64) -> Image {
    let view = scene.offset().compose(&script.pose(t).inverse());
    warp_image(&scene.texture, &view, manifest.wide_dims.0, manifest.wide_dims.1)
}

/// Burst-camera view of the scene at an instant.
///
/// A burst pixel covers several texture pixels, so each one integrates a
/// 4x4 subpixel grid over its footprint; point sampling would alias any
/// scene detail finer than the burst pitch.
pub fn render_burst_at(
    scene: &ScenePlane,
    script: &MotionScript,
    manifest: &CaptureManifest,
    t: f64,
) -> Result<Image, CaptureError> {
    let g = plane_homography(&manifest.rig, manifest.depth)?;
    let view = scene.offset().compose(&script.pose(t).inverse()).compose(&g.inverse());
    let (w, h) = manifest.burst_dims;
    let tex = &scene.texture;
    let channels = tex.channels();
    let offsets = [-0.375f64, -0.125, 0.125, 0.375];
    let mut samples = vec![0.0f32; w * h * channels];
    let mut mask = vec![true; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = vec![0.0f64; channels];
            let mut ok = true;
            for dy in offsets {
                for dx in offsets {
                    let p = view.apply((x as f64 + dx, y as f64 + dy));
                    for (c, a) in acc.iter_mut().enumerate() {
                        match tex.sample_bilinear(p.0, p.1, c) {
                            Some((v, valid)) => {
                                *a += v as f64;
                                ok &= valid;
                            }
                            None => ok = false,
                        }
                    }
                }
            }
            let idx = y * w + x;
            mask[idx] = ok;
            for (c, a) in acc.iter().enumerate() {
                samples[idx * channels + c] = (a / 16.0) as f32;
            }
        }
    }
    Image::with_mask(w, h, channels, samples, mask).map_err(CaptureError::from)
}

/// Temporal mean of `samples` instantaneous wide renders spaced uniformly
/// (endpoints included) across the wide exposure. Linear in the scene and
/// free of clipping and noise.
pub fn render_wide_mean(
    scene: &ScenePlane,
    script: &MotionScript,
    manifest: &CaptureManifest,
    samples: usize,
) -> Result<Image, CaptureError> {
    if samples == 0 {
        return Err(CaptureError::BadSubframes(0));
    }
    let (ts, te) = manifest.wide_exposure;
    let (w, h) = manifest.wide_dims;
    let first = render_wide_at(scene, script, manifest, sample_time(ts, te, 0, samples));
    let mut acc: Vec<f64> = first.samples().iter().map(|&v| v as f64).collect();
    let mut mask: Vec<bool> = first.mask().to_vec();
    for k in 1..samples {
        let frame = render_wide_at(scene, script, manifest, sample_time(ts, te, k, samples));
        for (a, &v) in acc.iter_mut().zip(frame.samples()) {
            *a += v as f64;
        }
        for (m, &fm) in mask.iter_mut().zip(frame.mask()) {
            *m &= fm;
        }
    }
    let inv = 1.0 / samples as f64;
    let samples_f32: Vec<f32> = acc.into_iter().map(|v| (v * inv) as f32).collect();
    Image::with_mask(w, h, first.channels(), samples_f32, mask).map_err(CaptureError::from)
}

fn sample_time(ts: f64, te: f64, k: usize, samples: usize) -> f64 {
    if samples == 1 {
        return 0.5 * (ts + te);
    }
    ts + (te - ts) * k as f64 / (samples - 1) as f64
}

/// Synthesizes the blurred wide frame and its sharp ground truth.
///
/// The blur is the temporal mean of `subframes * 4` renders across the
/// exposure, clipped at 1.0 (sensor saturation) and then degraded by the
/// manifest's wide noise model. The ground truth is a clean render at the
/// temporal-center burst frame's midpoint, the same instant trajectories
/// and kernels are anchored at, so restoration is compared against the
/// scene as it stood at the reference time.
pub fn synth_wide(
    scene: &ScenePlane,
    script: &MotionScript,
    manifest: &CaptureManifest,
    subframes: usize,
    seed: u64,
) -> Result<(Image, Image), CaptureError> {
    if subframes < 5 || subframes % 2 == 0 {
        return Err(CaptureError::BadSubframes(subframes));
    }
    let mean = render_wide_mean(scene, script, manifest, subframes * WIDE_SUPERSAMPLE)?;
    let clipped = mean.map(|v| v.min(1.0));
    let blurred = add_noise(&clipped, &manifest.noise.wide, derive_seed(seed, STREAM_WIDE_NOISE));
    let gt = render_wide_at(scene, script, manifest, manifest.anchor_time());
    Ok((blurred, gt))
}

/// Synthesizes the burst: one instantaneous render at each window midpoint,
/// degraded by a per-frame noise stream derived from `(seed, frame index)`.
pub fn synth_burst(
    scene: &ScenePlane,
    script: &MotionScript,
    manifest: &CaptureManifest,
    seed: u64,
) -> Result<BurstCapture, CaptureError> {
    let mut frames = Vec::with_capacity(manifest.burst_windows.len());
    for (i, mid) in manifest.burst_midpoints().into_iter().enumerate() {
        let clean = render_burst_at(scene, script, manifest, mid)?;
        frames.push(add_noise(&clean, &manifest.noise.burst, derive_seed(seed, i as u64)));
    }
    Ok(BurstCapture { frames, windows: manifest.burst_windows.clone() })
}

/// Largest wide-pixel displacement any grid point undergoes over a `dt`
/// interval, sampled on a 9x9 grid (corners included) across the script.
pub fn max_displacement(script: &MotionScript, dt: f64, dims: (usize, usize)) -> f64 {
    let (w, h) = dims;
    let span = (script.duration() - dt).max(0.0);
    let mut times: Vec<f64> = (0..=32).map(|k| span * k as f64 / 32.0).collect();
    for k in script.keys() {
        for t in [k.time, k.time - dt] {
            if t.is_finite() {
                times.push(t.clamp(0.0, span));
            }
        }
    }
    let mut worst = 0.0f64;
    for &t in &times {
        let step = script.pose(t + dt).compose(&script.pose(t).inverse());
        for gy in 0..9 {
            for gx in 0..9 {
                let p = (
                    (w - 1) as f64 * gx as f64 / 8.0,
                    (h - 1) as f64 * gy as f64 / 8.0,
                );
                let q = step.apply(p);
                let d = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
                worst = worst.max(d);
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Ground-truth oracles
// ---------------------------------------------------------------------------

/// Where the scene point under wide pixel `q` at `t_from` sits at `t_to`,
/// as a displacement in wide pixels. Exact, straight from the script.
pub fn ground_truth_wide_displacement(
    script: &MotionScript,
    q: (f64, f64),
    t_from: f64,
    t_to: f64,
) -> (f64, f64) {
    let step = script.pose(t_to).compose(&script.pose(t_from).inverse());
    let p = step.apply(q);
    (p.0 - q.0, p.1 - q.1)
}

/// Exact per-pixel blur kernels on the wide grid: displacements at the nine
/// kernel tap times, anchored at the central burst frame.
pub fn ground_truth_kernel_field(
    script: &MotionScript,
    manifest: &CaptureManifest,
) -> KernelField {
    let (w, h) = manifest.wide_dims;
    let (ts, te) = manifest.wide_exposure;
    let anchor = manifest.anchor_time();
    let mut taps = Vec::with_capacity(KERNEL_TAPS.len());
    for &tap in KERNEL_TAPS.iter() {
        let t_abs = ts + tap * (te - ts);
        let step = script.pose(t_abs).compose(&script.pose(anchor).inverse());
        let mut dx = vec![0.0f32; w * h];
        let mut dy = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = step.apply((x as f64, y as f64));
                dx[y * w + x] = (p.0 - x as f64) as f32;
                dy[y * w + x] = (p.1 - y as f64) as f32;
            }
        }
        taps.push((dx, dy));
    }
    KernelField::from_taps(w, h, taps, [false; 9], vec![true; w * h])
        .expect("oracle kernel construction")
}

/// Exact trajectories on the central burst frame's grid: for each burst
/// frame, the displacement (in burst pixels) of every center-grid pixel.
pub fn ground_truth_burst_trajectories(
    script: &MotionScript,
    manifest: &CaptureManifest,
) -> Result<TrajectoryField, CaptureError> {
    let g = plane_homography(&manifest.rig, manifest.depth)?;
    let (w, h) = manifest.burst_dims;
    let mids = manifest.burst_midpoints();
    let c = center_index(mids.len());
    let mut maps = Vec::with_capacity(mids.len());
    for &t in &mids {
        // burst(center) -> wide(ref) -> wide(t) -> burst
        let step = g
            .compose(&script.pose(t))
            .compose(&script.pose(mids[c]).inverse())
            .compose(&g.inverse());
        let mut map = FlowField::constant(w, h, 0.0, 0.0, 1.0);
        for y in 0..h {
            for x in 0..w {
                let p = step.apply((x as f64, y as f64));
                map.dx[y * w + x] = (p.0 - x as f64) as f32;
                map.dy[y * w + x] = (p.1 - y as f64) as f32;
            }
        }
        maps.push(map);
    }
    TrajectoryField::new(maps, c).map_err(|e| CaptureError::BadManifest(e.to_string()))
}

// ---------------------------------------------------------------------------
// Randomized capture generation
// ---------------------------------------------------------------------------

/// Knobs of the randomized capture generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureRecipe {
    pub wide_dims: (usize, usize),
    pub channels: usize,
    /// Object-scale ratio between the cameras (wide objects are this many
    /// times larger).
    pub scale: usize,
    pub focal_wide: f64,
    /// Camera baseline, meters.
    pub baseline: f64,
    /// Plane depth range, meters (drawn uniform in inverse depth).
    pub depth_range: (f64, f64),
    /// Total translation budget across the exposure, wide pixels.
    pub translation_px: f64,
    /// Rotation key range, degrees.
    pub rotation_deg: f64,
    /// Scale key jitter around 1.
    pub scale_jitter: f64,
    pub noise: CaptureNoise,
}

impl CaptureRecipe {
    pub fn burst_dims(&self) -> (usize, usize) {
        (self.wide_dims.0 * 2 / self.scale, self.wide_dims.1 * 2 / self.scale)
    }

    /// Mostly-translation motion, useful when kernels must stay nearly
    /// linear in time.
    pub fn translation_dominant(mut self) -> Self {
        self.rotation_deg = 0.15;
        self.scale_jitter = 0.0015;
        self
    }
}

impl Default for CaptureRecipe {
    fn default() -> Self {
        Self {
            wide_dims: (192, 192),
            channels: 1,
            scale: 6,
            focal_wide: 192.0,
            baseline: 0.1,
            depth_range: (0.5, 20.0),
            translation_px: 22.0,
            rotation_deg: 0.8,
            scale_jitter: 0.008,
            noise: CaptureNoise {
                wide: NoiseParams::gaussian(0.01),
                burst: NoiseParams::gaussian(0.01),
            },
        }
    }
}

/// A fully rendered synthetic capture plus the hidden state that produced
/// it (kept around for oracle-based evaluation).
#[derive(Debug, Clone)]
pub struct SyntheticCapture {
    pub scene: ScenePlane,
    pub script: MotionScript,
    pub manifest: CaptureManifest,
    pub subframes: usize,
    pub wide: Image,
    pub gt: Image,
    pub burst: BurstCapture,
}

/// Procedural scene texture: random blobs and a dense fine-grained
/// speckle over a low-frequency base, values kept inside [0.02, 0.98].
/// The speckle puts restorable detail at the pixel scale everywhere, the
/// way natural images carry energy across all frequencies.
pub fn random_scene(width: usize, height: usize, channels: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes: Vec<Vec<f32>> = Vec::with_capacity(channels);
    let base_phase: (f64, f64) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    let base_freq: (f64, f64) = (rng.gen_range(0.008..0.02), rng.gen_range(0.008..0.02));
    for _ in 0..channels {
        let mut plane = vec![0.5f32; width * height];
        for y in 0..height {
            for x in 0..width {
                let v = 0.12
                    * ((x as f64 * base_freq.0 + base_phase.0).sin()
                        + (y as f64 * base_freq.1 + base_phase.1).cos());
                plane[y * width + x] += v as f32;
            }
        }
        planes.push(plane);
    }

    let speckle = {
        let mut field: Vec<f64> =
            (0..width * height).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Two box passes correlate the grain over roughly two pixels so it
        // survives bilinear resampling instead of aliasing away.
        for _ in 0..2 {
            field = box_blur3(&field, width, height);
        }
        field
    };
    let speckle_amp = 0.35;
    let speckle_gain: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.7..1.0)).collect();
    for (c, plane) in planes.iter_mut().enumerate() {
        let gain = speckle_amp * speckle_gain[c];
        for (p, &s) in plane.iter_mut().zip(&speckle) {
            *p += (gain * s) as f32;
        }
    }

    let blobs = 60 + (width * height) / 4096;
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let sigma = rng.gen_range(3.0..(width.min(height) as f64 / 8.0).max(6.0));
        let amp = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.6..1.0)).collect();
        let reach = (3.0 * sigma).ceil() as isize;
        let x0 = ((cx as isize) - reach).max(0) as usize;
        let x1 = (((cx as isize) + reach) as usize).min(width - 1);
        let y0 = ((cy as isize) - reach).max(0) as usize;
        let y1 = (((cy as isize) + reach) as usize).min(height - 1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = amp * (-d2 * inv).exp();
                for (c, plane) in planes.iter_mut().enumerate() {
                    plane[y * width + x] += (g * tint[c]) as f32;
                }
            }
        }
    }
    Image::from_fn(width, height, channels, |x, y, c| {
        planes[c][y * width + x].clamp(0.02, 0.98)
    })
}

/// Separable 3x3 box blur with clamped edges.
fn box_blur3(field: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut rows = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            let l = x.saturating_sub(1);
            let r = (x + 1).min(width - 1);
            rows[y * width + x] =
                (field[y * width + l] + field[y * width + x] + field[y * width + r]) / 3.0;
        }
    }
    let mut out = vec![0.0f64; width * height];
    for y in 0..height {
        let u = y.saturating_sub(1);
        let d = (y + 1).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (rows[u * width + x] + rows[y * width + x] + rows[d * width + x]) / 3.0;
        }
    }
    out
}

fn random_script(
    rng: &mut ChaCha8Rng,
    recipe: &CaptureRecipe,
    duration: f64,
) -> Result<MotionScript, CaptureError> {
    let pivot = [
        (recipe.wide_dims.0 as f64 - 1.0) / 2.0,
        (recipe.wide_dims.1 as f64 - 1.0) / 2.0,
    ];
    let segments = 3usize;
    let rot_range = recipe.rotation_deg.to_radians();
    for _attempt in 0..200 {
        let mut keys = Vec::with_capacity(segments + 1);
        let mut translation = [0.0f64; 2];
        for k in 0..=segments {
            if k > 0 {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let step = rng.gen_range(0.3..1.0) * recipe.translation_px / segments as f64;
                translation[0] += step * angle.cos();
                translation[1] += step * angle.sin();
            }
            keys.push(MotionKey {
                time: duration * k as f64 / segments as f64,
                translation,
                rotation: rng.gen_range(-rot_range..=rot_range),
                scale: 1.0 + rng.gen_range(-recipe.scale_jitter..=recipe.scale_jitter),
            });
        }
        let script = MotionScript::new(duration, pivot, keys)?;
        if max_displacement(&script, WIDE_FRAME_DT, recipe.wide_dims) <= MAX_FRAME_STEP_PX {
            return Ok(script);
        }
    }
    Err(CaptureError::MotionTooFast)
}

/// Draws the hidden state of a capture: scene, script, timing and rig.
pub fn random_capture_setup(
    recipe: &CaptureRecipe,
    seed: u64,
) -> Result<(ScenePlane, MotionScript, CaptureManifest, usize), CaptureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let subframe_choices = [5usize, 7, 9, 11, 13];
    let subframes = subframe_choices[rng.gen_range(0..subframe_choices.len())];

    // The burst runs at 60 FPS and must span the whole exposure; otherwise
    // kernel taps near the exposure ends would extrapolate far beyond any
    // observed motion. Drawing the frame count first and deriving the
    // exposure keeps every capture covered: 5..=14 frames give exposures
    // from 1/15 s to just under 1/4 s.
    let n = rng.gen_range(BURST_FRAME_RANGE.0..=BURST_FRAME_RANGE.1);
    let exposure = (n - 1) as f64 * BURST_FRAME_DT;
    let (ts, te) = (0.0, exposure);

    // Burst midpoints symmetric about the exposure center; the central one
    // is the anchor instant the ground truth is rendered at.
    let mid = 0.5 * (ts + te);
    let burst_windows: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let m = mid + (i as f64 - (n as f64 - 1.0) / 2.0) * BURST_FRAME_DT;
            (m - 0.5 * BURST_MAX_EXPOSURE, m + 0.5 * BURST_MAX_EXPOSURE)
        })
        .collect();

    let inv_lo = 1.0 / recipe.depth_range.1;
    let inv_hi = 1.0 / recipe.depth_range.0;
    let depth = 1.0 / rng.gen_range(inv_lo..=inv_hi);

    let burst_dims = recipe.burst_dims();
    let manifest = CaptureManifest {
        wide_exposure: (ts, te),
        burst_windows,
        frames: n,
        wide_dims: recipe.wide_dims,
        burst_dims,
        rig: CameraRig::centered(
            recipe.focal_wide,
            recipe.wide_dims,
            recipe.scale,
            burst_dims,
            Extrinsic::baseline(recipe.baseline),
        ),
        depth,
        noise: recipe.noise.clone(),
    };
    manifest.validate()?;

    let script = random_script(&mut rng, recipe, exposure)?;

    let scene_w = recipe.wide_dims.0 * 9 / 4;
    let scene_h = recipe.wide_dims.1 * 9 / 4;
    let texture = random_scene(scene_w, scene_h, recipe.channels, derive_seed(seed, 1));
    let origin = [
        (scene_w - recipe.wide_dims.0) as f64 / 2.0,
        (scene_h - recipe.wide_dims.1) as f64 / 2.0,
    ];
    Ok((ScenePlane { texture, origin }, script, manifest, subframes))
}

/// Draws and fully renders a capture.
pub fn synthesize(recipe: &CaptureRecipe, seed: u64) -> Result<SyntheticCapture, CaptureError> {
    let (scene, script, manifest, subframes) = random_capture_setup(recipe, seed)?;
    let (wide, gt) = synth_wide(&scene, &script, &manifest, subframes, derive_seed(seed, 2))?;
    let burst = synth_burst(&scene, &script, &manifest, derive_seed(seed, STREAM_BURST_NOISE))?;
    Ok(SyntheticCapture { scene, script, manifest, subframes, wide, gt, burst })
}
