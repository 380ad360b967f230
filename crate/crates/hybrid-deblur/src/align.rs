//! Field-of-view alignment between the long-exposure camera and the burst
//! camera.
//!
//! The cameras sit millimeters apart and look at the same scene, so the
//! view of a fronto-parallel plane at depth `d` maps between them through
//! the plane-induced homography `K_u (R + t n^T / d) K_w^-1`. Alignment
//! sweeps a fixed set of depth candidates, scores each by photometrically
//! normalized MSE against the temporal average of the burst, and keeps the
//! best-scoring depth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::{Matrix3, Vector3};

use crate::image::{downsample_avg, warp_image, Homography, Image, ImageError};

/// Minimum fraction of scored pixels that must overlap for a candidate to
/// participate in the sweep.
const MIN_OVERLAP: f64 = 0.10;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("burst is empty")]
    EmptyBurst,
    #[error("burst frame {0} has a different shape than frame 0")]
    FrameShapeMismatch(usize),
    #[error("wide image and burst frames disagree in channel count")]
    ChannelMismatch,
    #[error("plane depth must be positive and finite, got {0}")]
    BadDepth(f64),
    #[error("depth candidates: {0}")]
    BadCandidates(String),
    #[error("no depth candidate leaves at least {:.0}% overlap with the wide frame", MIN_OVERLAP * 100.0)]
    InsufficientOverlap,
}

// ---------------------------------------------------------------------------
// Camera geometry
// ---------------------------------------------------------------------------

/// Rigid transform from the wide camera frame to the burst camera frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extrinsic {
    #[serde(rename = "R")]
    pub rotation: [[f64; 3]; 3],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
}

impl Extrinsic {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Pure horizontal baseline in meters.
    pub fn baseline(b: f64) -> Self {
        let mut e = Self::identity();
        e.translation[0] = b;
        e
    }

    fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.translation)
    }
}

/// Intrinsics of both cameras plus their relative pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRig {
    #[serde(rename = "K_w")]
    pub k_wide: [[f64; 3]; 3],
    #[serde(rename = "K_u")]
    pub k_ultra: [[f64; 3]; 3],
    #[serde(rename = "E")]
    pub extrinsic: Extrinsic,
}

fn pinhole(focal: f64, width: usize, height: usize) -> [[f64; 3]; 3] {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]]
}

impl CameraRig {
    /// Centered pinhole cameras: a wide camera with focal `f_w` px and a
    /// burst camera with focal `f_w / scale` px, related by `extrinsic`.
    pub fn centered(
        f_wide: f64,
        wide_dims: (usize, usize),
        scale: usize,
        burst_dims: (usize, usize),
        extrinsic: Extrinsic,
    ) -> Self {
        Self {
            k_wide: pinhole(f_wide, wide_dims.0, wide_dims.1),
            k_ultra: pinhole(f_wide / scale as f64, burst_dims.0, burst_dims.1),
            extrinsic,
        }
    }

    pub fn k_wide_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.k_wide[r][c])
    }

    pub fn k_ultra_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.k_ultra[r][c])
    }
}

/// Homography induced by a fronto-parallel plane at depth `depth` (meters),
/// mapping wide pixel coordinates to burst pixel coordinates:
/// `K_u (R + t n^T / d) K_w^-1` with `n = (0, 0, 1)^T`.
pub fn plane_homography(rig: &CameraRig, depth: f64) -> Result<Homography, AlignError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(AlignError::BadDepth(depth));
    }
    let mut inner = rig.extrinsic.rotation_matrix();
    let t = rig.extrinsic.translation_vector();
    for r in 0..3 {
        inner[(r, 2)] += t[r] / depth;
    }
    let k_w_inv = rig
        .k_wide_matrix()
        .try_inverse()
        .ok_or_else(|| AlignError::BadCandidates("wide intrinsics are singular".into()))?;
    let m = rig.k_ultra_matrix() * inner * k_w_inv;
    Homography::from_matrix(m).map_err(AlignError::from)
}

// ---------------------------------------------------------------------------
// Depth candidates
// ---------------------------------------------------------------------------

/// Strictly increasing positive plane depths to sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthCandidates(Vec<f64>);

impl DepthCandidates {
    pub fn new(depths: Vec<f64>) -> Result<Self, AlignError> {
        if depths.len() < 2 {
            return Err(AlignError::BadCandidates("need at least two candidates".into()));
        }
        for pair in depths.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(AlignError::BadCandidates("depths must be strictly increasing".into()));
            }
        }
        if depths.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(AlignError::BadCandidates("depths must be positive and finite".into()));
        }
        Ok(Self(depths))
    }

    /// `count` candidates spaced uniformly in inverse depth over
    /// `[min_depth, max_depth]`, returned in increasing depth order.
    pub fn inverse_uniform(min_depth: f64, max_depth: f64, count: usize) -> Result<Self, AlignError> {
        if !(min_depth > 0.0 && max_depth > min_depth) || count < 2 {
            return Err(AlignError::BadCandidates(format!(
                "bad inverse-depth range {min_depth}..{max_depth} x{count}"
            )));
        }
        let inv_near = 1.0 / min_depth;
        let inv_far = 1.0 / max_depth;
        let mut depths: Vec<f64> = (0..count)
            .map(|k| {
                let inv = inv_near + (inv_far - inv_near) * k as f64 / (count - 1) as f64;
                1.0 / inv
            })
            .collect();
        depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self::new(depths)
    }

    pub fn depths(&self) -> &[f64] {
        &self.0
    }

    /// The median candidate (lower middle for even counts), used to break
    /// exact score ties.
    pub fn median(&self) -> f64 {
        self.0[(self.0.len() - 1) / 2]
    }
}

impl Default for DepthCandidates {
    /// 32 candidates uniform in inverse depth over 0.2 m .. 100 m.
    fn default() -> Self {
        Self::inverse_uniform(0.2, 100.0, 32).expect("default candidate range is valid")
    }
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// Outcome of a plane sweep: the chosen depth, its full-resolution
/// wide-to-burst homography, and the per-candidate score curve (`None`
/// where the overlap test failed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub depth: f64,
    #[serde(rename = "H")]
    pub homography: Homography,
    pub scores: Vec<Option<f64>>,
}

/// Pixel-wise mean of the burst. A pixel is valid only when valid in every
/// frame.
pub fn average_burst(frames: &[Image]) -> Result<Image, AlignError> {
    let first = frames.first().ok_or(AlignError::EmptyBurst)?;
    let mut acc = vec![0.0f64; first.samples().len()];
    let mut mask = vec![true; first.pixel_count()];
    for (i, frame) in frames.iter().enumerate() {
        if !frame.same_shape(first) {
            return Err(AlignError::FrameShapeMismatch(i));
        }
        for (a, &v) in acc.iter_mut().zip(frame.samples()) {
            *a += v as f64;
        }
        for (m, &fm) in mask.iter_mut().zip(frame.mask()) {
            *m &= fm;
        }
    }
    let n = frames.len() as f64;
    let samples = acc.into_iter().map(|v| (v / n) as f32).collect();
    Image::with_mask(first.width(), first.height(), first.channels(), samples, mask)
        .map_err(AlignError::from)
}

/// Photometrically normalized MSE between `reference` and `probe` over
/// jointly valid pixels. Returns `(mse, overlap_fraction)`.
fn normalized_mse(reference: &Image, probe: &Image) -> (f64, f64) {
    let c = reference.channels();
    let mut n = 0usize;
    let mut sum_r = 0.0f64;
    let mut sum_p = 0.0f64;
    let mut sum_rr = 0.0f64;
    let mut sum_pp = 0.0f64;
    for y in 0..reference.height() {
        for x in 0..reference.width() {
            if !(reference.is_valid(x, y) && probe.is_valid(x, y)) {
                continue;
            }
            n += 1;
            for ch in 0..c {
                let r = reference.get(x, y, ch) as f64;
                let p = probe.get(x, y, ch) as f64;
                sum_r += r;
                sum_p += p;
                sum_rr += r * r;
                sum_pp += p * p;
            }
        }
    }
    let overlap = n as f64 / reference.pixel_count() as f64;
    if n == 0 {
        return (f64::INFINITY, 0.0);
    }
    let count = (n * c) as f64;
    let mean_r = sum_r / count;
    let mean_p = sum_p / count;
    let var_r = (sum_rr / count - mean_r * mean_r).max(0.0);
    let var_p = (sum_pp / count - mean_p * mean_p).max(0.0);
    let gain = if var_p > 1e-12 { (var_r / var_p).sqrt() } else { 1.0 };
    let offset = mean_r - gain * mean_p;

    let mut se = 0.0f64;
    for y in 0..reference.height() {
        for x in 0..reference.width() {
            if !(reference.is_valid(x, y) && probe.is_valid(x, y)) {
                continue;
            }
            for ch in 0..c {
                let r = reference.get(x, y, ch) as f64;
                let p = gain * probe.get(x, y, ch) as f64 + offset;
                se += (r - p) * (r - p);
            }
        }
    }
    (se / count, overlap)
}

/// Plane-sweep alignment of the burst onto the wide frame.
///
/// The wide frame is block-averaged down to the burst's object scale
/// (`scale`, nominally 6) and each candidate warps the burst average onto
/// that grid; scoring never upsamples the burst.
pub fn fov_align(
    wide: &Image,
    burst: &[Image],
    candidates: &DepthCandidates,
    rig: &CameraRig,
    scale: usize,
) -> Result<AlignmentResult, AlignError> {
    let u_avg = average_burst(burst)?;
    if u_avg.channels() != wide.channels() {
        return Err(AlignError::ChannelMismatch);
    }
    let w_small = downsample_avg(wide, scale)?;
    let to_full = Homography::downscale_map(scale).inverse();

    let mut scores = Vec::with_capacity(candidates.depths().len());
    for &d in candidates.depths() {
        let h = plane_homography(rig, d)?;
        let m = h.compose(&to_full);
        let warped = warp_image(&u_avg, &m, w_small.width(), w_small.height());
        let (mse, overlap) = normalized_mse(&w_small, &warped);
        scores.push(if overlap >= MIN_OVERLAP { Some(mse) } else { None });
    }

    let median = candidates.median();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let replace = match best {
            None => true,
            Some((bi, bs)) => {
                s < bs
                    || (s == bs
                        && (candidates.depths()[i] - median).abs()
                            < (candidates.depths()[bi] - median).abs())
            }
        };
        if replace {
            best = Some((i, s));
        }
    }
    let (idx, _) = best.ok_or(AlignError::InsufficientOverlap)?;
    let depth = candidates.depths()[idx];
    Ok(AlignmentResult { depth, homography: plane_homography(rig, depth)?, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| {
            let fx = x as f32 * 0.11;
            let fy = y as f32 * 0.07;
            0.5 + 0.2 * fx.sin() * fy.cos() + 0.15 * (0.031 * (x as f32 + 2.0 * y as f32)).sin()
        })
    }

    fn test_rig(baseline: f64) -> CameraRig {
        CameraRig::centered(360.0, (360, 360), 6, (120, 120), Extrinsic::baseline(baseline))
    }

    /// Renders a consistent wide/burst pair of a textured plane at `depth`.
    fn render_pair(rig: &CameraRig, depth: f64) -> (Image, Vec<Image>) {
        let scene = texture(640, 640);
        // Wide pixel p sees scene pixel p + offset.
        let offset = Homography::translation(140.0, 140.0);
        let wide = warp_image(&scene, &offset, 360, 360);
        let g = plane_homography(rig, depth).unwrap();
        let to_scene = offset.compose(&g.inverse());
        let burst = warp_image(&scene, &to_scene, 120, 120);
        (wide, vec![burst.clone(), burst])
    }

    #[test]
    fn plane_homography_ignores_depth_without_baseline() {
        let rig = test_rig(0.0);
        let near = plane_homography(&rig, 0.5).unwrap();
        let far = plane_homography(&rig, 50.0).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((near.matrix()[(r, c)] - far.matrix()[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plane_homography_baseline_shifts_translation_column() {
        let rig = test_rig(0.24);
        let d = 2.0;
        let with = plane_homography(&rig, d).unwrap();
        let without = plane_homography(&test_rig(0.0), d).unwrap();
        let f_u = rig.k_ultra[0][0];
        let expected_shift = 0.24 * f_u / d;
        let shift = with.matrix()[(0, 2)] - without.matrix()[(0, 2)];
        assert!(
            (shift - expected_shift).abs() < 1e-9,
            "x-translation shift {shift}, expected {expected_shift}"
        );
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1)] {
            assert!((with.matrix()[(r, c)] - without.matrix()[(r, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_homography_far_limit_drops_translation() {
        let mut rig = test_rig(0.3);
        // A small relative rotation about the vertical axis.
        let a = 0.01f64;
        rig.extrinsic.rotation = [
            [a.cos(), 0.0, a.sin()],
            [0.0, 1.0, 0.0],
            [-a.sin(), 0.0, a.cos()],
        ];
        let far = plane_homography(&rig, 1e9).unwrap();
        let pure_rotation = {
            let mut r = rig.clone();
            r.extrinsic.translation = [0.0; 3];
            plane_homography(&r, 1.0).unwrap()
        };
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (far.matrix()[(r, c)] - pure_rotation.matrix()[(r, c)]).abs() < 1e-6,
                    "far-plane limit should converge to the pure-rotation homography"
                );
            }
        }
    }

    #[test]
    fn plane_homography_rejects_nonpositive_depth() {
        let rig = test_rig(0.1);
        assert!(plane_homography(&rig, 0.0).is_err());
        assert!(plane_homography(&rig, -3.0).is_err());
        assert!(plane_homography(&rig, f64::NAN).is_err());
    }

    #[test]
    fn default_candidates_cover_inverse_depth_range() {
        let d = DepthCandidates::default();
        assert_eq!(d.depths().len(), 32);
        assert!((d.depths()[0] - 0.2).abs() < 1e-12);
        assert!((d.depths()[31] - 100.0).abs() < 1e-9);
        for pair in d.depths().windows(2) {
            assert!(pair[0] < pair[1]);
        }
        // Uniform in inverse depth: check an interior element.
        let inv = 1.0 / 0.2 + (1.0 / 100.0 - 1.0 / 0.2) / 31.0;
        assert!((d.depths()[1] - 1.0 / inv).abs() < 1e-9);
    }

    #[test]
    fn candidates_reject_disorder() {
        assert!(DepthCandidates::new(vec![1.0]).is_err());
        assert!(DepthCandidates::new(vec![1.0, 1.0]).is_err());
        assert!(DepthCandidates::new(vec![2.0, 1.0]).is_err());
        assert!(DepthCandidates::new(vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn average_burst_basics() {
        let one = Image::constant(8, 8, 1, 0.25);
        let avg = average_burst(&[one.clone()]).unwrap();
        assert_eq!(avg, one);
        let two = Image::constant(8, 8, 1, 0.75);
        let avg = average_burst(&[one, two]).unwrap();
        assert!((avg.get(3, 3, 0) - 0.5).abs() < 1e-7);
        assert!(average_burst(&[]).is_err());
    }

    #[test]
    fn sweep_recovers_true_depth() {
        let rig = test_rig(0.3);
        let candidates =
            DepthCandidates::new(vec![0.5, 0.8, 1.2, 2.0, 3.5, 6.0, 12.0, 40.0]).unwrap();
        let d_true = 2.0;
        let (wide, burst) = render_pair(&rig, d_true);
        let result = fov_align(&wide, &burst, &candidates, &rig, 6).unwrap();
        assert_eq!(result.depth, d_true, "scores: {:?}", result.scores);
        // The winning score must be the curve minimum.
        let best = result.scores[3].unwrap();
        for s in result.scores.iter().flatten() {
            assert!(best <= *s);
        }
    }

    #[test]
    fn sweep_minimum_is_sharp_at_the_true_depth() {
        // Texture can alias into shallow local minima at wrong depths, but
        // the true depth must win by a wide margin on noiseless data.
        let rig = test_rig(0.3);
        let candidates = DepthCandidates::inverse_uniform(0.5, 50.0, 16).unwrap();
        let d_true = candidates.depths()[7];
        let (wide, burst) = render_pair(&rig, d_true);
        let result = fov_align(&wide, &burst, &candidates, &rig, 6).unwrap();
        assert_eq!(result.depth, d_true);
        let mut scores: Vec<f64> = result.scores.iter().map(|s| s.unwrap()).collect();
        let best = result.scores[7].unwrap();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = scores[scores.len() / 2];
        assert!(
            best < 0.01 * median,
            "true-depth score {best:.3e} not sharp against median {median:.3e}"
        );
    }

    #[test]
    fn zero_baseline_tie_breaks_to_median() {
        let rig = test_rig(0.0);
        let candidates = DepthCandidates::new(vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0]).unwrap();
        let (wide, burst) = render_pair(&rig, 3.0);
        let result = fov_align(&wide, &burst, &candidates, &rig, 6).unwrap();
        assert_eq!(
            result.depth,
            candidates.median(),
            "depth is unobservable without a baseline; the median candidate wins"
        );
    }

    #[test]
    fn photometric_scaling_leaves_argmin_unchanged() {
        let rig = test_rig(0.3);
        let candidates = DepthCandidates::new(vec![0.7, 1.1, 2.0, 3.3, 7.0, 20.0]).unwrap();
        let (wide, burst) = render_pair(&rig, 2.0);
        let baseline = fov_align(&wide, &burst, &candidates, &rig, 6).unwrap();
        let wide2 = wide.map(|v| 1.6 * v + 0.07);
        let burst2: Vec<Image> = burst.iter().map(|f| f.map(|v| 1.6 * v + 0.07)).collect();
        let scaled = fov_align(&wide2, &burst2, &candidates, &rig, 6).unwrap();
        assert_eq!(baseline.depth, scaled.depth);
    }

    #[test]
    fn hopeless_geometry_reports_no_overlap() {
        let rig = test_rig(0.3);
        let (wide, burst) = render_pair(&rig, 2.0);
        // A rig whose burst camera looks far away from the wide frame.
        let mut broken = rig.clone();
        broken.k_ultra[0][2] += 1e5;
        let candidates = DepthCandidates::new(vec![1.0, 2.0, 4.0]).unwrap();
        match fov_align(&wide, &burst, &candidates, &broken, 6) {
            Err(AlignError::InsufficientOverlap) => {}
            other => panic!("expected InsufficientOverlap, got {other:?}"),
        }
    }

    #[test]
    fn alignment_result_serializes_with_short_names() {
        let rig = test_rig(0.1);
        let result = AlignmentResult {
            depth: 2.0,
            homography: plane_homography(&rig, 2.0).unwrap(),
            scores: vec![Some(0.5), None],
        };
        let json = serde_json::to_value(&result).unwrap();
        assert!(json.get("depth").is_some());
        assert!(json.get("H").is_some());
        assert_eq!(json["scores"][1], serde_json::Value::Null);
    }
}
