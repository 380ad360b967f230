//! Pixel trajectories across the burst and their conversion into per-pixel
//! blur kernels on the wide camera's grid.
//!
//! Adjacent-frame flows are chained outward from the temporally central
//! frame, giving every pixel of that frame a polyline through the burst.
//! Mapping the polylines through the cross-camera homography and
//! resampling them at nine fixed normalized times yields the 18-channel
//! kernel field the deblurring operator consumes.

use thiserror::Error;

use crate::capture::CaptureManifest;
use crate::flow::{compose_flows, estimate_flow, FlowError, FlowField, FlowParams};
use crate::image::{Homography, Image};

/// Normalized sample times of a blur kernel: nine uniform taps spanning the
/// wide exposure.
pub const KERNEL_TAPS: [f64; 9] =
    [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

/// Index of the temporally central frame among `n`; ties break toward the
/// earlier frame.
pub fn center_index(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("trajectory needs at least one frame")]
    Empty,
    #[error("center index {center} out of range for {frames} frames")]
    BadCenter { center: usize, frames: usize },
    #[error("trajectory maps must share dimensions")]
    ShapeMismatch,
    #[error("validity mask length {got} does not match {want} pixels")]
    MaskLength { got: usize, want: usize },
    #[error("timestamps: {0}")]
    BadTimestamps(String),
    #[error("{frames} trajectory frames but {stamps} timestamps")]
    FrameCountMismatch { frames: usize, stamps: usize },
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Per-frame displacement fields anchored on the central frame's grid:
/// `map(i)` tells where each anchor pixel sits in frame `i`, in that grid's
/// pixel units. The central map is identically zero.
#[derive(Debug, Clone)]
pub struct TrajectoryField {
    width: usize,
    height: usize,
    center: usize,
    maps: Vec<FlowField>,
    valid: Vec<bool>,
}

impl TrajectoryField {
    pub fn new(maps: Vec<FlowField>, center: usize) -> Result<Self, TrajectoryError> {
        let n = maps.len();
        if n == 0 {
            return Err(TrajectoryError::Empty);
        }
        if center >= n {
            return Err(TrajectoryError::BadCenter { center, frames: n });
        }
        if maps.iter().any(|m| !m.same_shape(&maps[0])) {
            return Err(TrajectoryError::ShapeMismatch);
        }
        let (w, h) = (maps[0].width(), maps[0].height());
        Ok(Self { width: w, height: h, center, maps, valid: vec![true; w * h] })
    }

    pub fn with_validity(
        maps: Vec<FlowField>,
        center: usize,
        valid: Vec<bool>,
    ) -> Result<Self, TrajectoryError> {
        let mut t = Self::new(maps, center)?;
        if valid.len() != t.width * t.height {
            return Err(TrajectoryError::MaskLength {
                got: valid.len(),
                want: t.width * t.height,
            });
        }
        t.valid = valid;
        Ok(t)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frames(&self) -> usize {
        self.maps.len()
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn map(&self, i: usize) -> &FlowField {
        &self.maps[i]
    }

    pub fn maps(&self) -> &[FlowField] {
        &self.maps
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }
}

/// Estimates the adjacent-frame flows of a burst, each oriented away from
/// the central frame: for pairs after the center the source is the earlier
/// frame, for pairs before it the later one. `flows[j]` connects frames
/// `j` and `j+1`.
pub fn adjacent_flows(
    frames: &[Image],
    center: usize,
    params: &FlowParams,
) -> Result<Vec<FlowField>, TrajectoryError> {
    if frames.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    if center >= frames.len() {
        return Err(TrajectoryError::BadCenter { center, frames: frames.len() });
    }
    let mut flows = Vec::with_capacity(frames.len().saturating_sub(1));
    for j in 0..frames.len() - 1 {
        let f = if j >= center {
            estimate_flow(&frames[j], &frames[j + 1], params)?
        } else {
            estimate_flow(&frames[j + 1], &frames[j], params)?
        };
        flows.push(f);
    }
    Ok(flows)
}

/// Chains adjacent-frame flows (as produced by [`adjacent_flows`]) into
/// full trajectories anchored at frame `center`.
pub fn accumulate(flows: &[FlowField], center: usize) -> Result<TrajectoryField, TrajectoryError> {
    let n = flows.len() + 1;
    if center >= n {
        return Err(TrajectoryError::BadCenter { center, frames: n });
    }
    if flows.iter().any(|f| !f.same_shape(&flows[0])) && !flows.is_empty() {
        return Err(TrajectoryError::ShapeMismatch);
    }
    let (w, h) = if flows.is_empty() {
        (1, 1)
    } else {
        (flows[0].width(), flows[0].height())
    };
    let mut maps: Vec<Option<FlowField>> = vec![None; n];
    maps[center] = Some(FlowField::zeros(w, h));
    for i in center + 1..n {
        let prev = maps[i - 1].as_ref().expect("built in order");
        maps[i] = Some(compose_flows(prev, &flows[i - 1])?);
    }
    for i in (0..center).rev() {
        let next = maps[i + 1].as_ref().expect("built in order");
        maps[i] = Some(compose_flows(next, &flows[i])?);
    }
    TrajectoryField::new(maps.into_iter().map(|m| m.expect("all filled")).collect(), center)
}

/// Transfers trajectories onto another camera's grid.
///
/// `h` maps output-grid points into the trajectory grid. Each output pixel
/// `q` is pushed through `h`, follows the sampled trajectory there, and the
/// endpoint is pulled back through `h`'s inverse, yielding displacements in
/// output-grid pixels. Pixels whose preimage misses the trajectory grid
/// become invalid zero trajectories.
pub fn warp_trajectories(
    traj: &TrajectoryField,
    h: &Homography,
    out_w: usize,
    out_h: usize,
) -> TrajectoryField {
    let h_inv = h.inverse();
    let n = traj.frames();
    let mut maps = vec![FlowField::constant(out_w, out_h, 0.0, 0.0, 0.0); n];
    let mut valid = vec![false; out_w * out_h];
    let (tw, th) = (traj.width() as f64 - 1.0, traj.height() as f64 - 1.0);
    for y in 0..out_h {
        for x in 0..out_w {
            let q = (x as f64, y as f64);
            let p = h.apply(q);
            let idx = y * out_w + x;
            if !(p.0 >= 0.0 && p.0 <= tw && p.1 >= 0.0 && p.1 <= th) {
                continue;
            }
            // Validity of the sampling stencil in the source grid.
            let x0 = p.0.floor().min(tw - 0.0) as usize;
            let y0 = p.1.floor().min(th - 0.0) as usize;
            let x1 = (x0 + 1).min(traj.width() - 1);
            let y1 = (y0 + 1).min(traj.height() - 1);
            let stencil_ok = traj.valid[y0 * traj.width() + x0]
                && traj.valid[y0 * traj.width() + x1]
                && traj.valid[y1 * traj.width() + x0]
                && traj.valid[y1 * traj.width() + x1];
            valid[idx] = stencil_ok;
            for i in 0..n {
                let (dx, dy, conf) = traj.map(i).sample_clamped(p.0, p.1);
                let back = h_inv.apply((p.0 + dx, p.1 + dy));
                maps[i].dx[idx] = (back.0 - q.0) as f32;
                maps[i].dy[idx] = (back.1 - q.1) as f32;
                maps[i].confidence[idx] = if stencil_ok { conf as f32 } else { 0.0 };
            }
        }
    }
    TrajectoryField::with_validity(maps, traj.center(), valid).expect("shapes are consistent")
}

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

/// Burst frame midpoints expressed on the wide exposure's normalized
/// timeline: 0 at exposure start, 1 at its end.
#[derive(Debug, Clone)]
pub struct RelativeTimestamps(Vec<f64>);

impl RelativeTimestamps {
    pub fn new(values: Vec<f64>) -> Result<Self, TrajectoryError> {
        let fail = |s: String| Err(TrajectoryError::BadTimestamps(s));
        if values.len() < 2 {
            return fail("need at least two burst frames".into());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return fail("non-finite timestamp".into());
        }
        for pair in values.windows(2) {
            if !(pair[0] < pair[1]) {
                return fail(format!("timestamps not strictly increasing: {} then {}", pair[0], pair[1]));
            }
        }
        if values.iter().any(|&v| !(-0.25..=1.25).contains(&v)) {
            return fail("timestamp strays too far outside the exposure".into());
        }
        let inside = values.iter().filter(|&&v| (0.0..=1.0).contains(&v)).count();
        if inside < 2 {
            return fail(format!("only {inside} burst midpoints inside the exposure").into());
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Normalized burst midpoints of a capture manifest.
pub fn relative_timestamps(manifest: &CaptureManifest) -> Result<RelativeTimestamps, TrajectoryError> {
    let (ts, te) = manifest.wide_exposure;
    let span = te - ts;
    if !(span.is_finite() && span > 0.0) {
        return Err(TrajectoryError::BadTimestamps(format!(
            "wide exposure span {span} must be positive"
        )));
    }
    let values = manifest
        .burst_midpoints()
        .into_iter()
        .map(|m| (m - ts) / span)
        .collect();
    RelativeTimestamps::new(values)
}

// ---------------------------------------------------------------------------
// Kernel fields
// ---------------------------------------------------------------------------

/// Per-pixel blur kernels: a displacement per pixel at each of the nine
/// normalized tap times, 18 scalar channels in total. Displacements are in
/// the field's own grid units and anchored so the trajectory passes through
/// zero at the central burst frame's time.
#[derive(Debug, Clone)]
pub struct KernelField {
    width: usize,
    height: usize,
    taps: Vec<(Vec<f32>, Vec<f32>)>,
    extrapolated: [bool; 9],
    valid: Vec<bool>,
}

impl KernelField {
    pub const TAP_COUNT: usize = KERNEL_TAPS.len();
    pub const CHANNELS: usize = 2 * KERNEL_TAPS.len();

    pub fn from_taps(
        width: usize,
        height: usize,
        taps: Vec<(Vec<f32>, Vec<f32>)>,
        extrapolated: [bool; 9],
        valid: Vec<bool>,
    ) -> Result<Self, TrajectoryError> {
        if taps.len() != Self::TAP_COUNT {
            return Err(TrajectoryError::BadTimestamps(format!(
                "expected {} kernel taps, got {}",
                Self::TAP_COUNT,
                taps.len()
            )));
        }
        let n = width * height;
        if taps.iter().any(|(dx, dy)| dx.len() != n || dy.len() != n) {
            return Err(TrajectoryError::ShapeMismatch);
        }
        if valid.len() != n {
            return Err(TrajectoryError::MaskLength { got: valid.len(), want: n });
        }
        Ok(Self { width, height, taps, extrapolated, valid })
    }

    /// All-zero kernels: blurring with them is the identity.
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            taps: vec![(vec![0.0; n], vec![0.0; n]); Self::TAP_COUNT],
            extrapolated: [false; 9],
            valid: vec![true; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn tap(&self, k: usize) -> (&[f32], &[f32]) {
        (&self.taps[k].0, &self.taps[k].1)
    }

    pub fn displacement(&self, x: usize, y: usize, k: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.taps[k].0[i], self.taps[k].1[i])
    }

    pub fn extrapolated(&self) -> &[bool; 9] {
        &self.extrapolated
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Largest displacement magnitude over valid pixels, handy for sizing
    /// solver workloads.
    pub fn max_extent(&self) -> f64 {
        let mut worst = 0.0f64;
        for (dx, dy) in &self.taps {
            for i in 0..dx.len() {
                if self.valid[i] {
                    let m = (dx[i] as f64).hypot(dy[i] as f64);
                    worst = worst.max(m);
                }
            }
        }
        worst
    }

    /// Zeroes every kernel whose whole streak stays within `min_extent`
    /// pixels of its anchor. Streaks that short are indistinguishable from
    /// estimation jitter, and deconvolving with them only amplifies noise;
    /// an exact zero turns the blur operator into the identity there.
    pub fn suppress_short(&mut self, min_extent: f64) {
        if min_extent <= 0.0 {
            return;
        }
        let n = self.width * self.height;
        for i in 0..n {
            let longest = self
                .taps
                .iter()
                .map(|(dx, dy)| (dx[i] as f64).hypot(dy[i] as f64))
                .fold(0.0f64, f64::max);
            if longest < min_extent {
                for (dx, dy) in self.taps.iter_mut() {
                    dx[i] = 0.0;
                    dy[i] = 0.0;
                }
            }
        }
    }
}

/// Resamples trajectories at the nine kernel tap times.
///
/// Each tap interpolates linearly between the two bracketing burst frames;
/// taps before the first or after the last timestamp extrapolate the end
/// segments and are flagged. Pixel validity carries over from the
/// trajectory field.
pub fn resample_kernels(
    traj: &TrajectoryField,
    stamps: &RelativeTimestamps,
) -> Result<KernelField, TrajectoryError> {
    let r = stamps.values();
    if traj.frames() != r.len() {
        return Err(TrajectoryError::FrameCountMismatch {
            frames: traj.frames(),
            stamps: r.len(),
        });
    }
    let n = r.len();
    let (w, h) = (traj.width(), traj.height());
    let mut taps = Vec::with_capacity(KERNEL_TAPS.len());
    let mut extrapolated = [false; 9];
    for (k, &t) in KERNEL_TAPS.iter().enumerate() {
        extrapolated[k] = t < r[0] || t > r[n - 1];
        // Bracketing segment; end segments also serve extrapolation.
        let mut i = match r.iter().position(|&ri| ri > t) {
            Some(0) => 0,
            Some(j) => j - 1,
            None => n - 2,
        };
        i = i.min(n - 2);
        let u = (t - r[i]) / (r[i + 1] - r[i]);
        let (pa_x, pa_y) = (&traj.map(i).dx, &traj.map(i).dy);
        let (pb_x, pb_y) = (&traj.map(i + 1).dx, &traj.map(i + 1).dy);
        let mut dx = vec![0.0f32; w * h];
        let mut dy = vec![0.0f32; w * h];
        for j in 0..w * h {
            dx[j] = (pa_x[j] as f64 + u * (pb_x[j] as f64 - pa_x[j] as f64)) as f32;
            dy[j] = (pa_y[j] as f64 + u * (pb_y[j] as f64 - pa_y[j] as f64)) as f32;
        }
        taps.push((dx, dy));
    }
    KernelField::from_taps(w, h, taps, extrapolated, traj.valid().to_vec())
}

/// Renders a sparse overlay of kernel polylines for visual inspection.
pub fn render_kernel_streaks(kernels: &KernelField, stride: usize) -> Image {
    let (w, h) = (kernels.width(), kernels.height());
    let stride = stride.max(1);
    let mut canvas = vec![0.0f32; w * h];
    let mut splat = |x: f64, y: f64, v: f32| {
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            return;
        }
        let xi = x.round() as usize;
        let yi = y.round() as usize;
        canvas[yi.min(h - 1) * w + xi.min(w - 1)] += v;
    };
    let half = stride / 2;
    for y in (half..h).step_by(stride) {
        for x in (half..w).step_by(stride) {
            if !kernels.is_valid(x, y) {
                continue;
            }
            for k in 0..KernelField::TAP_COUNT - 1 {
                let (ax, ay) = kernels.displacement(x, y, k);
                let (bx, by) = kernels.displacement(x, y, k + 1);
                let (ax, ay) = (x as f64 + ax as f64, y as f64 + ay as f64);
                let (bx, by) = (x as f64 + bx as f64, y as f64 + by as f64);
                let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
                let steps = (len.ceil() as usize).max(1) * 2;
                for s in 0..=steps {
                    let u = s as f64 / steps as f64;
                    splat(ax + u * (bx - ax), ay + u * (by - ay), 1.0);
                }
            }
        }
    }
    let peak = canvas.iter().cloned().fold(0.0f32, f32::max).max(1.0);
    Image::new(w, h, 1, canvas.into_iter().map(|v| v / peak).collect())
        .expect("canvas dimensions are valid")
}
