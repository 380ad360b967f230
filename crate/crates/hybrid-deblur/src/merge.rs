//! Burst fusion onto the wide frame.
//!
//! The burst frames are first placed on the downsampled wide grid through
//! the cross-camera homography, then pulled onto the central frame through
//! the per-pixel trajectories plus a residual flow against the wide frame
//! itself. A robust weighted average suppresses misaligned or corrupted
//! samples, and the result re-enters the full-resolution wide frame as a
//! low-frequency detail correction gated by the per-pixel evidence.

use thiserror::Error;

use crate::flow::{compose_flows, estimate_flow, FlowError, FlowParams};
use crate::image::{
    downsample_avg, upsample_bilinear, warp_image, Homography, Image, ImageError,
};
use crate::trajectory::{warp_trajectories, TrajectoryField};

/// Weights never drop below this when averaging, so every pixel keeps a
/// defined value even where all frames disagree.
pub const WEIGHT_FLOOR: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("burst is empty")]
    EmptyBurst,
    #[error("burst has {frames} frames but the trajectory field covers {traj}")]
    FrameCountMismatch { frames: usize, traj: usize },
    #[error("merge parameters: {0}")]
    BadParams(String),
    #[error("{0}x{1} image does not match the {2}x{3} grid")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Settings of the burst merge.
#[derive(Debug, Clone)]
pub struct MergeParams {
    /// Resolution ratio between the wide frame and the merge grid.
    pub scale: usize,
    /// Photometric residual scale of the robust weights.
    pub sigma_weight: f64,
    /// Gain on the injected detail correction.
    pub detail_gain: f64,
    pub flow: FlowParams,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self { scale: 6, sigma_weight: 0.05, detail_gain: 1.0, flow: FlowParams::default() }
    }
}

impl MergeParams {
    fn validate(&self) -> Result<(), MergeError> {
        if self.scale == 0 {
            return Err(MergeError::BadParams("scale must be positive".into()));
        }
        if !(self.sigma_weight.is_finite() && self.sigma_weight > 0.0) {
            return Err(MergeError::BadParams(format!(
                "sigma_weight {} must be positive",
                self.sigma_weight
            )));
        }
        if !self.detail_gain.is_finite() {
            return Err(MergeError::BadParams("detail_gain must be finite".into()));
        }
        Ok(())
    }
}

/// The burst resampled onto the downsampled wide grid, with per-frame
/// per-pixel robust weights (pre-floor) and the reference it was aligned
/// against.
#[derive(Debug, Clone)]
pub struct AlignedBurst {
    pub frames: Vec<Image>,
    pub weights: Vec<Vec<f32>>,
    pub center: usize,
    pub reference: Image,
}

impl AlignedBurst {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Aligns every burst frame onto the downsampled wide grid.
///
/// `h_hat` maps downsampled-wide coordinates into burst coordinates, and
/// `traj` carries per-pixel motion on the burst grid anchored at the
/// central frame. Each output pixel follows the residual wide-to-center
/// flow, then the trajectory to frame `i`, and samples the
/// homography-warped frame there. Samples that leave the frame fall back
/// to the wide reference with zero weight.
pub fn align_burst(
    burst: &[Image],
    traj: &TrajectoryField,
    h_hat: &Homography,
    wide: &Image,
    params: &MergeParams,
) -> Result<AlignedBurst, MergeError> {
    params.validate()?;
    if burst.is_empty() {
        return Err(MergeError::EmptyBurst);
    }
    if burst.len() != traj.frames() {
        return Err(MergeError::FrameCountMismatch { frames: burst.len(), traj: traj.frames() });
    }
    for f in burst {
        if f.width() != traj.width() || f.height() != traj.height() {
            return Err(MergeError::ShapeMismatch(
                f.width(),
                f.height(),
                traj.width(),
                traj.height(),
            ));
        }
        if f.channels() != wide.channels() {
            return Err(MergeError::BadParams(format!(
                "burst has {} channels, wide has {}",
                f.channels(),
                wide.channels()
            )));
        }
    }

    let reference = downsample_avg(wide, params.scale)?;
    let (w, h) = (reference.width(), reference.height());
    let ch = reference.channels();
    let center = traj.center();

    // If the homography maps one merge-grid pixel onto several burst
    // pixels, point-sampling content that fine would alias the burst's
    // pixel-level texture into every warped frame; box-prefilter the
    // frames down to the grid's sampling rate first. The default rig's
    // burst already sits at the grid's object scale, making the warp a
    // unit-rate resample that needs no prefilter.
    let shrink = sampling_ratio(h_hat, w, h);
    let warped: Vec<Image> = if shrink > 1 {
        let h_grid = Homography::downscale_map(shrink).compose(h_hat);
        burst
            .iter()
            .map(|f| Ok(warp_image(&downsample_avg(f, shrink)?, &h_grid, w, h)))
            .collect::<Result<_, MergeError>>()?
    } else {
        burst.iter().map(|f| warp_image(f, h_hat, w, h)).collect()
    };
    let traj_grid = warp_trajectories(traj, h_hat, w, h);

    // Residual alignment between the wide reference and the warped center
    // frame mops up homography error and the blur-centroid shift.
    let residual_flow = estimate_flow(&reference, &warped[center], &params.flow)?;

    let inv_two_sigma_sq = 1.0 / (2.0 * params.sigma_weight * params.sigma_weight);
    let mut frames = Vec::with_capacity(burst.len());
    let mut weights = Vec::with_capacity(burst.len());
    for i in 0..burst.len() {
        let track = compose_flows(&residual_flow, traj_grid.map(i))?;
        let mut img = reference.clone();
        let mut wts = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let (dx, dy) = track.get(x, y);
                let conf = track.confidence[idx] as f64;
                let sx = x as f64 + dx as f64;
                let sy = y as f64 + dy as f64;
                let mut ok = true;
                let mut residual_sq = 0.0f64;
                for c in 0..ch {
                    match warped[i].sample_bilinear(sx, sy, c) {
                        Some((v, valid)) if valid => {
                            img.set(x, y, c, v);
                            let d = v as f64 - reference.get(x, y, c) as f64;
                            residual_sq += d * d;
                        }
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    let wgt = (-(residual_sq / ch as f64) * inv_two_sigma_sq).exp() * conf;
                    wts[idx] = wgt as f32;
                } else {
                    // Fall back to the reference with zero weight.
                    for c in 0..ch {
                        img.set(x, y, c, reference.get(x, y, c));
                    }
                }
            }
        }
        frames.push(img);
        weights.push(wts);
    }
    Ok(AlignedBurst { frames, weights, center, reference: reference.clone() })
}

/// Separable [1 2 1]/4 smoothing with clamped edges, channel by channel.
fn binomial_blur(img: &Image) -> Image {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut horizontal = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let l = img.get(x.saturating_sub(1), y, c);
                let r = img.get((x + 1).min(w - 1), y, c);
                horizontal.set(x, y, c, 0.25 * (l + 2.0 * img.get(x, y, c) + r));
            }
        }
    }
    let mut out = horizontal.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let u = horizontal.get(x, y.saturating_sub(1), c);
                let d = horizontal.get(x, (y + 1).min(h - 1), c);
                out.set(x, y, c, 0.25 * (u + 2.0 * horizontal.get(x, y, c) + d));
            }
        }
    }
    out
}

/// Linear sampling-rate ratio of a map at the center of a `w` x `h` grid:
/// how many source pixels one output pixel spans, rounded, at least 1.
fn sampling_ratio(h: &Homography, w: usize, height: usize) -> usize {
    let c = ((w as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let p0 = h.apply(c);
    let px = h.apply((c.0 + 1.0, c.1));
    let py = h.apply((c.0, c.1 + 1.0));
    let area = ((px.0 - p0.0) * (py.1 - p0.1) - (px.1 - p0.1) * (py.0 - p0.0)).abs();
    area.sqrt().round().max(1.0) as usize
}

/// Floored weighted average of the aligned frames.
pub fn merge_aligned(aligned: &AlignedBurst) -> Image {
    let reference = &aligned.reference;
    let (w, h, ch) = (reference.width(), reference.height(), reference.channels());
    let mut out = reference.clone();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut wsum = 0.0f64;
            for wts in &aligned.weights {
                wsum += wts[idx].max(WEIGHT_FLOOR) as f64;
            }
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (frame, wts) in aligned.frames.iter().zip(&aligned.weights) {
                    acc += wts[idx].max(WEIGHT_FLOOR) as f64 * frame.get(x, y, c) as f64;
                }
                out.set(x, y, c, (acc / wsum) as f32);
            }
        }
    }
    out
}

/// Per-pixel evidence that at least one burst frame aligned well: the
/// maximum pre-floor weight across frames, in [0, 1].
pub fn gate_map(aligned: &AlignedBurst) -> Image {
    let reference = &aligned.reference;
    let (w, h) = (reference.width(), reference.height());
    let mut gate = vec![0.0f32; w * h];
    for wts in &aligned.weights {
        for (g, &v) in gate.iter_mut().zip(wts) {
            *g = g.max(v);
        }
    }
    Image::new(w, h, 1, gate).expect("gate dimensions are valid")
}

/// Replaces the wide frame's low frequencies with the merged burst, gated
/// per pixel and scaled by the detail gain. Pixels whose effective gain is
/// zero are copied from the wide frame bit for bit.
pub fn detail_inject(
    wide: &Image,
    merged: &Image,
    gate: &Image,
    params: &MergeParams,
) -> Result<Image, MergeError> {
    params.validate()?;
    let low = downsample_avg(wide, params.scale)?;
    if !merged.same_shape(&low) {
        return Err(MergeError::ShapeMismatch(
            merged.width(),
            merged.height(),
            low.width(),
            low.height(),
        ));
    }
    if gate.width() != low.width() || gate.height() != low.height() || gate.channels() != 1 {
        return Err(MergeError::ShapeMismatch(
            gate.width(),
            gate.height(),
            low.width(),
            low.height(),
        ));
    }
    let mut correction = merged.clone();
    for (c, &l) in correction.samples_mut().iter_mut().zip(low.samples()) {
        *c -= l;
    }
    // The burst reaches this grid through bilinear taps, whose transfer
    // rolls off the top octave; the wide path's block average keeps it.
    // Raw differencing would read that mismatch as detail and inject it as
    // texture error, so keep only the band both paths measure faithfully.
    let correction = binomial_blur(&correction);
    let up = upsample_bilinear(&correction, params.scale, wide.width(), wide.height());
    let gate_up = upsample_bilinear(gate, params.scale, wide.width(), wide.height());

    let ch = wide.channels();
    let mut out = wide.clone();
    for y in 0..wide.height() {
        for x in 0..wide.width() {
            let g = params.detail_gain * gate_up.get(x, y, 0) as f64;
            if g == 0.0 {
                continue;
            }
            for c in 0..ch {
                let v = out.get(x, y, c) as f64 + g * up.get(x, y, c) as f64;
                out.set(x, y, c, v as f32);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{plane_homography, CameraRig, Extrinsic};
    use crate::capture::{
        add_noise, random_scene, synth_burst, synth_wide, CaptureManifest, CaptureNoise,
        ground_truth_burst_trajectories, MotionScript, NoiseParams, ScenePlane,
        BURST_FRAME_DT, BURST_MAX_EXPOSURE,
    };
    use crate::image::psnr;
    use crate::trajectory::center_index;

    fn static_setup(wide: usize, n: usize) -> (ScenePlane, MotionScript, CaptureManifest) {
        let burst = wide * 2 / 6;
        let exposure = 0.2;
        let mid = exposure / 2.0;
        let windows: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let m = mid + (i as f64 - (n as f64 - 1.0) / 2.0) * BURST_FRAME_DT;
                (m - 0.5 * BURST_MAX_EXPOSURE, m + 0.5 * BURST_MAX_EXPOSURE)
            })
            .collect();
        let manifest = CaptureManifest {
            wide_exposure: (0.0, exposure),
            burst_windows: windows,
            frames: n,
            wide_dims: (wide, wide),
            burst_dims: (burst, burst),
            rig: CameraRig::centered(
                wide as f64,
                (wide, wide),
                6,
                (burst, burst),
                Extrinsic::baseline(0.05),
            ),
            depth: 2.0,
            noise: CaptureNoise { wide: NoiseParams::none(), burst: NoiseParams::none() },
        };
        let side = wide * 9 / 4;
        let scene = ScenePlane {
            texture: random_scene(side, side, 1, 91),
            origin: [(side - wide) as f64 / 2.0; 2],
        };
        let script = MotionScript::stationary(exposure);
        (scene, script, manifest)
    }

    fn h_hat_of(manifest: &CaptureManifest, scale: usize) -> Homography {
        let g = plane_homography(&manifest.rig, manifest.depth).unwrap();
        g.compose(&Homography::downscale_map(scale).inverse())
    }

    #[test]
    fn static_burst_aligns_onto_the_reference() {
        let (scene, script, manifest) = static_setup(192, 5);
        let (wide, _) = synth_wide(&scene, &script, &manifest, 5, 1).unwrap();
        let burst = synth_burst(&scene, &script, &manifest, 2).unwrap();
        let traj = ground_truth_burst_trajectories(&script, &manifest).unwrap();
        let params = MergeParams::default();
        let aligned =
            align_burst(&burst.frames, &traj, &h_hat_of(&manifest, 6), &wide, &params).unwrap();

        // All frames identical and static: every aligned frame must match
        // the reference up to resampling error, with strong weights.
        let mut covered = 0usize;
        let mut weight_sum = 0.0f64;
        for (frame, wts) in aligned.frames.iter().zip(&aligned.weights) {
            for y in 4..28 {
                for x in 4..28 {
                    let idx = y * 32 + x;
                    if wts[idx] == 0.0 {
                        continue;
                    }
                    covered += 1;
                    weight_sum += wts[idx] as f64;
                    let d = (frame.get(x, y, 0) - aligned.reference.get(x, y, 0)).abs();
                    assert!(d < 0.05, "aligned static frame deviates by {d} at ({x},{y})");
                }
            }
        }
        assert!(covered > 5 * 400, "too few covered pixels: {covered}");
        // Weights mix photometric agreement with texture confidence, so
        // individual pixels vary; on average they must stay strong.
        let mean_weight = weight_sum / covered as f64;
        assert!(mean_weight > 0.45, "mean static weight {mean_weight} too weak");
        let merged = merge_aligned(&aligned);
        let err = (0..32 * 32)
            .map(|i| (merged.samples()[i] - aligned.reference.samples()[i]).abs() as f64)
            .sum::<f64>()
            / (32.0 * 32.0);
        assert!(err < 0.02, "static merge drifted from the reference by {err}");
    }

    #[test]
    fn equal_weights_reduce_to_the_mean() {
        let frames: Vec<Image> = (0..3)
            .map(|k| Image::constant(8, 8, 1, 0.2 + 0.1 * k as f32))
            .collect();
        let aligned = AlignedBurst {
            weights: vec![vec![0.5f32; 64]; 3],
            center: 1,
            reference: Image::constant(8, 8, 1, 0.3),
            frames,
        };
        let merged = merge_aligned(&aligned);
        for &v in merged.samples() {
            assert!((v - 0.3).abs() < 1e-6, "equal weights must average: {v}");
        }
    }

    #[test]
    fn merging_nine_noisy_frames_cuts_noise_like_an_average() {
        let n = 9usize;
        let sigma = 0.05f64;
        let clean = Image::constant(96, 96, 1, 0.5);
        let frames: Vec<Image> = (0..n)
            .map(|i| add_noise(&clean, &NoiseParams::gaussian(sigma), 100 + i as u64))
            .collect();
        let traj = ground_truth_static_traj(96, n);
        let params = MergeParams::default();
        let aligned =
            align_burst(&frames, &traj, &Homography::identity(), &big_flat(96 * 6), &params)
                .unwrap();
        let merged = merge_aligned(&aligned);
        let mean = merged.mean();
        let var: f64 = merged
            .samples()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (merged.samples().len() - 1) as f64;
        let bound = 1.25 * sigma / (n as f64).sqrt();
        assert!(
            var.sqrt() <= bound,
            "merged noise {:.4} above the {:.4} bound",
            var.sqrt(),
            bound
        );
    }

    fn ground_truth_static_traj(side: usize, n: usize) -> TrajectoryField {
        let maps = vec![crate::flow::FlowField::zeros(side, side); n];
        TrajectoryField::new(maps, center_index(n)).unwrap()
    }

    fn big_flat(side: usize) -> Image {
        Image::constant(side, side, 1, 0.5)
    }

    #[test]
    fn corrupted_frame_is_suppressed() {
        let (scene, script, manifest) = static_setup(192, 5);
        let (wide, _) = synth_wide(&scene, &script, &manifest, 5, 1).unwrap();
        let mut burst = synth_burst(&scene, &script, &manifest, 2).unwrap();
        // Paint a bright square into one frame.
        for y in 20..40 {
            for x in 20..40 {
                burst.frames[3].set(x, y, 0, 1.0);
            }
        }
        let traj = ground_truth_burst_trajectories(&script, &manifest).unwrap();
        let params = MergeParams::default();
        let aligned =
            align_burst(&burst.frames, &traj, &h_hat_of(&manifest, 6), &wide, &params).unwrap();

        // Inside the corrupted region (burst px 20..40 maps to merge-grid
        // px around the same area divided by the grid ratio), frame 3 must
        // carry far less weight than its peers.
        let mut bad = 0.0f64;
        let mut good = 0.0f64;
        let mut count = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                let idx = y * 32 + x;
                // Find merge pixels whose frame-3 sample is the painted white.
                if aligned.frames[3].get(x, y, 0) > 0.98 && aligned.weights[0][idx] > 0.2 {
                    bad += aligned.weights[3][idx] as f64;
                    good += aligned.weights[0][idx] as f64;
                    count += 1;
                }
            }
        }
        assert!(count > 4, "corrupted region did not land on the merge grid ({count} px)");
        bad /= count as f64;
        good /= count as f64;
        assert!(
            bad < 0.2 * good,
            "corrupted weight {bad:.4} not suppressed against {good:.4}"
        );
        // And the merged result ignores the white square.
        let merged = merge_aligned(&aligned);
        for y in 0..32 {
            for x in 0..32 {
                let idx = y * 32 + x;
                if aligned.frames[3].get(x, y, 0) > 0.98 && aligned.weights[0][idx] > 0.2 {
                    let d = (merged.get(x, y, 0) - aligned.reference.get(x, y, 0)).abs();
                    assert!(d < 0.1, "merged leaked the corruption: off by {d}");
                }
            }
        }
    }

    #[test]
    fn gate_is_the_prefloor_maximum() {
        let frames = vec![Image::constant(4, 4, 1, 0.5); 3];
        let mut weights = vec![vec![0.1f32; 16], vec![0.7f32; 16], vec![0.4f32; 16]];
        weights[1][5] = 0.0;
        weights[2][5] = 0.0;
        weights[0][5] = 0.0;
        let aligned = AlignedBurst {
            frames,
            weights,
            center: 1,
            reference: Image::constant(4, 4, 1, 0.5),
        };
        let gate = gate_map(&aligned);
        assert_eq!(gate.get(2, 2, 0), 0.7);
        assert_eq!(gate.get(1, 1, 0), 0.0);
    }

    #[test]
    fn zero_gate_or_gain_copies_the_wide_frame_exactly() {
        let wide = random_scene(96, 96, 1, 3);
        let merged = Image::constant(16, 16, 1, 0.9);
        let gate = Image::zeros(16, 16, 1);
        let params = MergeParams::default();
        let out = detail_inject(&wide, &merged, &gate, &params).unwrap();
        assert_eq!(out, wide, "zero gate must leave the wide frame untouched");

        let gate = Image::constant(16, 16, 1, 1.0);
        let zero_gain = MergeParams { detail_gain: 0.0, ..MergeParams::default() };
        let out = detail_inject(&wide, &merged, &gate, &zero_gain).unwrap();
        assert_eq!(out, wide, "zero gain must leave the wide frame untouched");
    }

    #[test]
    fn matching_low_frequencies_yield_zero_correction() {
        let wide = random_scene(96, 96, 1, 7);
        let merged = downsample_avg(&wide, 6).unwrap();
        let gate = Image::constant(16, 16, 1, 1.0);
        let out = detail_inject(&wide, &merged, &gate, &MergeParams::default()).unwrap();
        for (a, b) in out.samples().iter().zip(wide.samples()) {
            assert!((a - b).abs() < 1e-7, "zero correction must be a no-op");
        }
    }

    #[test]
    fn injection_moves_a_blurred_frame_toward_the_truth() {
        let (scene, script, manifest) = static_setup(192, 5);
        // Blur the wide frame artificially with a box along x.
        let (sharp, _) = synth_wide(&scene, &script, &manifest, 5, 1).unwrap();
        let mut wide = sharp.clone();
        for y in 0..192 {
            for x in 0..192 {
                let mut acc = 0.0f64;
                for k in -6i64..=6 {
                    let sx = (x as i64 + k).clamp(0, 191) as usize;
                    acc += sharp.get(sx, y, 0) as f64;
                }
                wide.set(x, y, 0, (acc / 13.0) as f32);
            }
        }
        let merged = downsample_avg(&sharp, 6).unwrap();
        let gate = Image::constant(32, 32, 1, 1.0);
        let out = detail_inject(&wide, &merged, &gate, &MergeParams::default()).unwrap();
        let before = psnr(&wide, &sharp).unwrap();
        let after = psnr(&out, &sharp).unwrap();
        assert!(
            after > before,
            "injecting true low frequencies must help: {before:.2} -> {after:.2} dB"
        );
    }

    #[test]
    fn input_validation() {
        let traj = ground_truth_static_traj(32, 3);
        let wide = big_flat(192);
        let params = MergeParams::default();
        assert!(matches!(
            align_burst(&[], &traj, &Homography::identity(), &wide, &params),
            Err(MergeError::EmptyBurst)
        ));
        let frames = vec![Image::constant(32, 32, 1, 0.5); 2];
        assert!(matches!(
            align_burst(&frames, &traj, &Homography::identity(), &wide, &params),
            Err(MergeError::FrameCountMismatch { .. })
        ));
        let bad = MergeParams { sigma_weight: 0.0, ..MergeParams::default() };
        let frames = vec![Image::constant(32, 32, 1, 0.5); 3];
        assert!(align_burst(&frames, &traj, &Homography::identity(), &wide, &bad).is_err());
    }
}
