//! Capture-to-result orchestration: loads capture directories, runs the
//! six processing stages (align, flow, trajectory, kernels, deblur,
//! merge), writes artifacts, batch-generates synthetic datasets and
//! renders evaluation reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{fov_align, AlignmentResult, DepthCandidates};
use crate::capture::{derive_seed, synthesize, CaptureManifest, CaptureRecipe, SyntheticCapture};
use crate::deblur::{
    deconvolve_cg, deconvolve_rl, BlurOperator, DeblurError, SolverLog, CG_DEFAULT_LAMBDA,
};
use crate::flow::{FlowField, FlowParams};
use crate::image::{psnr, ssim, Homography, Image};
use crate::io::{read_pfm, write_pfm, write_png16, IoError};
use crate::merge::{align_burst, detail_inject, gate_map, merge_aligned, MergeParams};
use crate::trajectory::{
    accumulate, adjacent_flows, center_index, relative_timestamps, render_kernel_streaks,
    resample_kernels, warp_trajectories, KernelField, RelativeTimestamps, TrajectoryField,
    KERNEL_TAPS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// Process exit code: 1 for stage/algorithm failures, 2 for I/O and
    /// configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { .. } => 1,
            _ => 2,
        }
    }
}

fn fs_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Fs { path: path.to_path_buf(), source }
}

fn stage<T, E: fmt::Display>(name: &'static str, result: Result<T, E>) -> Result<T, PipelineError> {
    result.map_err(|e| PipelineError::Stage { stage: name, message: e.to_string() })
}

fn elapsed(since: Instant) -> f64 {
    since.elapsed().as_secs_f64().max(1e-9)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    Rl,
    Cg,
}

impl SolverChoice {
    pub fn name(self) -> &'static str {
        match self {
            SolverChoice::Rl => "rl",
            SolverChoice::Cg => "cg",
        }
    }

    /// Iteration count used when none is requested explicitly.
    pub fn default_iterations(self) -> usize {
        match self {
            SolverChoice::Rl => 30,
            SolverChoice::Cg => 50,
        }
    }
}

impl FromStr for SolverChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rl" => Ok(SolverChoice::Rl),
            "cg" => Ok(SolverChoice::Cg),
            other => Err(format!("unknown solver {other:?}, expected rl or cg")),
        }
    }
}

impl fmt::Display for SolverChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Depth candidate grid, written `min:max:count` on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for DepthSpec {
    fn default() -> Self {
        Self { min: 0.2, max: 100.0, count: 32 }
    }
}

impl DepthSpec {
    pub fn candidates(&self) -> Result<DepthCandidates, PipelineError> {
        DepthCandidates::inverse_uniform(self.min, self.max, self.count)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

impl FromStr for DepthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected min:max:count, got {s:?}"));
        }
        let min: f64 = parts[0].parse().map_err(|_| format!("bad depth {:?}", parts[0]))?;
        let max: f64 = parts[1].parse().map_err(|_| format!("bad depth {:?}", parts[1]))?;
        let count: usize = parts[2].parse().map_err(|_| format!("bad count {:?}", parts[2]))?;
        Ok(Self { min, max, count })
    }
}

impl fmt::Display for DepthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.min, self.max, self.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Markdown => "report.md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}, expected csv or md")),
        }
    }
}

/// Everything a processing run can be told from outside: solver choice
/// and strength, the depth sweep, and the flow/merge parameters.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub solver: SolverChoice,
    pub iterations: usize,
    pub lambda: f64,
    pub depths: DepthSpec,
    pub flow: FlowParams,
    pub merge: MergeParams,
    /// Line samples per kernel segment in the blur operator.
    pub substeps: usize,
    /// Streaks shorter than this many pixels are zeroed before deblurring;
    /// they are indistinguishable from flow jitter, and deconvolving with
    /// them only sharpens noise.
    pub min_kernel_extent: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            solver: SolverChoice::Cg,
            iterations: SolverChoice::Cg.default_iterations(),
            lambda: CG_DEFAULT_LAMBDA,
            depths: DepthSpec::default(),
            flow: FlowParams::default(),
            merge: MergeParams::default(),
            substeps: 4,
            min_kernel_extent: 1.0,
        }
    }
}

impl PipelineConfig {
    /// Applies one pyramid-level setting to both flow estimators (burst
    /// tracking and merge-time residual flow).
    pub fn set_flow_levels(&mut self, levels: usize) {
        self.flow.levels = levels;
        self.merge.flow.levels = levels;
    }
}

// ---------------------------------------------------------------------------
// Capture loading
// ---------------------------------------------------------------------------

/// A capture directory pulled into memory. Ground truth is deliberately
/// not part of it; only the metrics step looks for `gt.pfm`.
#[derive(Debug, Clone)]
pub struct CaptureDir {
    pub manifest: CaptureManifest,
    pub wide: Image,
    pub burst: Vec<Image>,
}

pub fn load_capture(dir: &Path) -> Result<CaptureDir, PipelineError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| fs_err(&manifest_path, e))?;
    let manifest: CaptureManifest = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?;
    manifest
        .validate()
        .map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?;
    let wide = read_pfm(&dir.join("wide.pfm"))?;
    if (wide.width(), wide.height()) != manifest.wide_dims {
        return Err(PipelineError::Config(format!(
            "wide.pfm is {}x{} but the manifest says {:?}",
            wide.width(),
            wide.height(),
            manifest.wide_dims
        )));
    }
    let mut burst = Vec::with_capacity(manifest.frames);
    for i in 0..manifest.frames {
        let frame = read_pfm(&dir.join("burst").join(format!("{i:03}.pfm")))?;
        if (frame.width(), frame.height()) != manifest.burst_dims {
            return Err(PipelineError::Config(format!(
                "burst frame {i} is {}x{} but the manifest says {:?}",
                frame.width(),
                frame.height(),
                manifest.burst_dims
            )));
        }
        burst.push(frame);
    }
    Ok(CaptureDir { manifest, wide, burst })
}

/// Writes one capture in the standard directory layout.
pub fn write_capture(dir: &Path, capture: &SyntheticCapture) -> Result<(), PipelineError> {
    let burst_dir = dir.join("burst");
    fs::create_dir_all(&burst_dir).map_err(|e| fs_err(&burst_dir, e))?;
    write_pfm(&dir.join("wide.pfm"), &capture.wide)?;
    write_pfm(&dir.join("gt.pfm"), &capture.gt)?;
    write_json(&dir.join("manifest.json"), &capture.manifest)?;
    for (i, frame) in capture.burst.frames.iter().enumerate() {
        write_pfm(&burst_dir.join(format!("{i:03}.pfm")), frame)?;
    }
    Ok(())
}

/// Resolution ratio between the wide and burst cameras implied by the rig
/// focal lengths; doubles as the merge-grid downsample factor.
fn rig_scale(manifest: &CaptureManifest) -> Result<usize, PipelineError> {
    let fw = manifest.rig.k_wide[0][0];
    let fu = manifest.rig.k_ultra[0][0];
    if !(fw > 0.0 && fu > 0.0) {
        return Err(PipelineError::Config("camera focal lengths must be positive".into()));
    }
    let ratio = fw / fu;
    let scale = ratio.round();
    if scale < 1.0 || (ratio - scale).abs() > 1e-6 {
        return Err(PipelineError::Config(format!(
            "focal ratio {ratio} is not an integer downsample factor"
        )));
    }
    Ok(scale as usize)
}

// ---------------------------------------------------------------------------
// Stage driver
// ---------------------------------------------------------------------------

/// How far to take a run, and therefore which artifacts it emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineGoal {
    Align,
    Kernels,
    Deblur,
    Merge,
    Full,
}

/// Everything the stages produced. Stages past the requested goal stay
/// `None`; timings of skipped stages stay zero.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub scale: usize,
    pub alignment: AlignmentResult,
    pub flows: Option<Vec<FlowField>>,
    pub trajectories: Option<TrajectoryField>,
    pub stamps: Option<RelativeTimestamps>,
    pub kernels: Option<KernelField>,
    pub deblurred: Option<Image>,
    pub solver_log: Option<SolverLog>,
    pub merged: Option<Image>,
    pub gate: Option<Image>,
    pub final_image: Option<Image>,
    pub timings: StageTimings,
}

impl StageOutputs {
    fn base(scale: usize, alignment: AlignmentResult) -> Self {
        Self {
            scale,
            alignment,
            flows: None,
            trajectories: None,
            stamps: None,
            kernels: None,
            deblurred: None,
            solver_log: None,
            merged: None,
            gate: None,
            final_image: None,
            timings: StageTimings::default(),
        }
    }
}

/// Wall-clock seconds per stage, all positive once a stage has run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub align: f64,
    pub flow: f64,
    pub trajectory: f64,
    pub kernels: f64,
    pub deblur: f64,
    pub merge: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSummary {
    pub name: String,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
}

/// Contents of `metrics.json`. Quality numbers are present only when the
/// capture ships ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub depth: f64,
    pub solver: SolverSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_blurred: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_deblurred: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim_blurred: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim_deblurred: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim_final: Option<f64>,
    pub timings: StageTimings,
}

fn run_solver(
    op: &BlurOperator,
    wide: &Image,
    config: &PipelineConfig,
) -> Result<(Image, SolverLog), DeblurError> {
    match config.solver {
        SolverChoice::Rl => deconvolve_rl(op, wide, config.iterations),
        SolverChoice::Cg => deconvolve_cg(op, wide, config.lambda, config.iterations),
    }
}

fn drive(
    wide: &Image,
    burst: &[Image],
    manifest: &CaptureManifest,
    config: &PipelineConfig,
    goal: PipelineGoal,
    sink: &Sink,
) -> Result<StageOutputs, PipelineError> {
    let scale = rig_scale(manifest)?;
    let candidates = config.depths.candidates()?;

    let t = Instant::now();
    let alignment = stage("align", fov_align(wide, burst, &candidates, &manifest.rig, scale))?;
    let mut out = StageOutputs::base(scale, alignment);
    out.timings.align = elapsed(t);
    sink.align(&out.alignment)?;
    if goal == PipelineGoal::Align {
        return Ok(out);
    }

    let t = Instant::now();
    let center = center_index(burst.len());
    let flows = stage("flow", adjacent_flows(burst, center, &config.flow))?;
    out.timings.flow = elapsed(t);
    sink.flows(&flows)?;

    let t = Instant::now();
    let traj = stage("trajectory", accumulate(&flows, center))?;
    let stamps = stage("trajectory", relative_timestamps(manifest))?;
    out.timings.trajectory = elapsed(t);
    out.flows = Some(flows);

    let t = Instant::now();
    let wide_traj =
        warp_trajectories(&traj, &out.alignment.homography, wide.width(), wide.height());
    let mut kernels = stage("kernels", resample_kernels(&wide_traj, &stamps))?;
    kernels.suppress_short(config.min_kernel_extent);
    out.timings.kernels = elapsed(t);
    sink.kernels(&kernels, &stamps)?;
    out.stamps = Some(stamps);
    if goal == PipelineGoal::Kernels {
        out.trajectories = Some(traj);
        out.kernels = Some(kernels);
        return Ok(out);
    }

    let t = Instant::now();
    let op = stage("deblur", BlurOperator::new(&kernels, config.substeps))?;
    let (deblurred, log) = stage("deblur", run_solver(&op, wide, config))?;
    drop(op);
    out.timings.deblur = elapsed(t);
    sink.deblur(&deblurred, &log, config)?;
    out.kernels = Some(kernels);
    out.solver_log = Some(log);
    if goal == PipelineGoal::Deblur {
        out.trajectories = Some(traj);
        out.deblurred = Some(deblurred);
        return Ok(out);
    }

    let t = Instant::now();
    let merge_params = MergeParams { scale, ..config.merge.clone() };
    let h_hat =
        out.alignment.homography.compose(&Homography::downscale_map(scale).inverse());
    let aligned = stage("merge", align_burst(burst, &traj, &h_hat, &deblurred, &merge_params))?;
    let merged = merge_aligned(&aligned);
    let gate = gate_map(&aligned);
    let final_image = stage("merge", detail_inject(&deblurred, &merged, &gate, &merge_params))?;
    out.timings.merge = elapsed(t);
    sink.merge(&merged, &gate, &aligned.weights, &final_image)?;

    out.trajectories = Some(traj);
    out.deblurred = Some(deblurred);
    out.merged = Some(merged);
    out.gate = Some(gate);
    out.final_image = Some(final_image);
    Ok(out)
}

/// Runs the processing stages in memory, without touching the filesystem.
pub fn run_stages(
    wide: &Image,
    burst: &[Image],
    manifest: &CaptureManifest,
    config: &PipelineConfig,
    goal: PipelineGoal,
) -> Result<StageOutputs, PipelineError> {
    drive(wide, burst, manifest, config, goal, &Sink { target: None })
}

/// Processes one capture directory, writing the artifacts the goal calls
/// for as each stage completes (so a failed run keeps its partial
/// outputs). `Full` also scores against `gt.pfm` when present and writes
/// `metrics.json`.
pub fn run_capture(
    capture: &Path,
    out: &Path,
    config: &PipelineConfig,
    goal: PipelineGoal,
) -> Result<Option<Metrics>, PipelineError> {
    let data = load_capture(capture)?;
    fs::create_dir_all(out).map_err(|e| fs_err(out, e))?;
    let sink = Sink { target: Some((out, goal)) };
    let outputs = drive(&data.wide, &data.burst, &data.manifest, config, goal, &sink)?;
    if goal != PipelineGoal::Full {
        return Ok(None);
    }
    let metrics = build_metrics(capture, &data, config, &outputs)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(Some(metrics))
}

fn build_metrics(
    capture: &Path,
    data: &CaptureDir,
    config: &PipelineConfig,
    outputs: &StageOutputs,
) -> Result<Metrics, PipelineError> {
    let mut metrics = Metrics {
        depth: outputs.alignment.depth,
        solver: SolverSummary {
            name: config.solver.name().into(),
            iterations: config.iterations,
            lambda: matches!(config.solver, SolverChoice::Cg).then_some(config.lambda),
        },
        psnr_blurred: None,
        psnr_deblurred: None,
        psnr_final: None,
        ssim_blurred: None,
        ssim_deblurred: None,
        ssim_final: None,
        timings: outputs.timings,
    };
    let gt_path = capture.join("gt.pfm");
    if gt_path.is_file() {
        let gt = read_pfm(&gt_path)?;
        let deblurred = outputs.deblurred.as_ref().expect("full runs deblur");
        let final_image = outputs.final_image.as_ref().expect("full runs merge");
        metrics.psnr_blurred = Some(stage("metrics", psnr(&data.wide, &gt))?);
        metrics.psnr_deblurred = Some(stage("metrics", psnr(deblurred, &gt))?);
        metrics.psnr_final = Some(stage("metrics", psnr(final_image, &gt))?);
        metrics.ssim_blurred = Some(stage("metrics", ssim(&data.wide, &gt))?);
        metrics.ssim_deblurred = Some(stage("metrics", ssim(deblurred, &gt))?);
        metrics.ssim_final = Some(stage("metrics", ssim(final_image, &gt))?);
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Artifact writing
// ---------------------------------------------------------------------------

struct Sink<'a> {
    target: Option<(&'a Path, PipelineGoal)>,
}

impl Sink<'_> {
    fn dir_for(&self, stage_goal: PipelineGoal) -> Option<&Path> {
        match self.target {
            Some((dir, goal)) if goal == stage_goal || goal == PipelineGoal::Full => Some(dir),
            _ => None,
        }
    }

    fn align(&self, alignment: &AlignmentResult) -> Result<(), PipelineError> {
        let Some(dir) = self.dir_for(PipelineGoal::Align) else { return Ok(()) };
        write_json(&dir.join("align.json"), alignment)
    }

    fn flows(&self, flows: &[FlowField]) -> Result<(), PipelineError> {
        let Some((dir, PipelineGoal::Full)) = self.target else { return Ok(()) };
        let flow_dir = dir.join("flows");
        fs::create_dir_all(&flow_dir).map_err(|e| fs_err(&flow_dir, e))?;
        for (i, flow) in flows.iter().enumerate() {
            let (vectors, confidence) = flow_to_images(flow);
            write_pfm(&flow_dir.join(format!("flow_{i:02}.pfm")), &vectors)?;
            write_pfm(&flow_dir.join(format!("flow_{i:02}.conf.pfm")), &confidence)?;
        }
        Ok(())
    }

    fn kernels(
        &self,
        kernels: &KernelField,
        stamps: &RelativeTimestamps,
    ) -> Result<(), PipelineError> {
        let Some(dir) = self.dir_for(PipelineGoal::Kernels) else { return Ok(()) };
        let kernel_dir = dir.join("kernels");
        fs::create_dir_all(&kernel_dir).map_err(|e| fs_err(&kernel_dir, e))?;
        for k in 0..KERNEL_TAPS.len() {
            write_pfm(&kernel_dir.join(format!("tap_{k}.pfm")), &kernel_tap_image(kernels, k))?;
        }
        let valid = kernels.valid();
        let meta = KernelMeta {
            taps: KERNEL_TAPS,
            timestamps: stamps.values(),
            extrapolated: *kernels.extrapolated(),
            valid_fraction: valid.iter().filter(|&&v| v).count() as f64 / valid.len() as f64,
            max_extent: kernels.max_extent(),
        };
        write_json(&kernel_dir.join("meta.json"), &meta)?;
        write_png16(&kernel_dir.join("streaks.png"), &render_kernel_streaks(kernels, 12))?;
        Ok(())
    }

    fn deblur(
        &self,
        deblurred: &Image,
        log: &SolverLog,
        config: &PipelineConfig,
    ) -> Result<(), PipelineError> {
        let Some(dir) = self.dir_for(PipelineGoal::Deblur) else { return Ok(()) };
        write_pfm(&dir.join("wide_deblurred.pfm"), deblurred)?;
        let dump = SolverDump {
            solver: config.solver.name(),
            iterations: log.values.len(),
            lambda: matches!(config.solver, SolverChoice::Cg).then_some(config.lambda),
            quantity: match config.solver {
                SolverChoice::Rl => "negative_log_likelihood",
                SolverChoice::Cg => "residual_norm",
            },
            values: &log.values,
        };
        write_json(&dir.join("solver.json"), &dump)
    }

    fn merge(
        &self,
        merged: &Image,
        gate: &Image,
        weights: &[Vec<f32>],
        final_image: &Image,
    ) -> Result<(), PipelineError> {
        let Some(dir) = self.dir_for(PipelineGoal::Merge) else { return Ok(()) };
        write_pfm(&dir.join("merged.pfm"), merged)?;
        write_pfm(&dir.join("gate.pfm"), gate)?;
        let weight_dir = dir.join("weights");
        fs::create_dir_all(&weight_dir).map_err(|e| fs_err(&weight_dir, e))?;
        for (i, w) in weights.iter().enumerate() {
            let img = Image::new(merged.width(), merged.height(), 1, w.clone())
                .expect("weights share the merge grid");
            write_pfm(&weight_dir.join(format!("frame_{i:02}.pfm")), &img)?;
        }
        write_pfm(&dir.join("final.pfm"), final_image)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct KernelMeta<'a> {
    taps: [f64; 9],
    timestamps: &'a [f64],
    extrapolated: [bool; 9],
    valid_fraction: f64,
    max_extent: f64,
}

#[derive(Serialize)]
struct SolverDump<'a> {
    solver: &'static str,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    quantity: &'static str,
    values: &'a [f64],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Config(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| fs_err(path, e))
}

/// Splits a flow field into a 3-channel vector image (dx, dy, zero pad)
/// and a single-channel confidence image.
fn flow_to_images(flow: &FlowField) -> (Image, Image) {
    let (w, h) = (flow.width(), flow.height());
    let mut samples = vec![0.0f32; w * h * 3];
    for i in 0..w * h {
        samples[3 * i] = flow.dx[i];
        samples[3 * i + 1] = flow.dy[i];
    }
    let vectors = Image::new(w, h, 3, samples).expect("flow dimensions are valid");
    let confidence =
        Image::new(w, h, 1, flow.confidence.clone()).expect("flow dimensions are valid");
    (vectors, confidence)
}

fn kernel_tap_image(kernels: &KernelField, k: usize) -> Image {
    let (w, h) = (kernels.width(), kernels.height());
    let (dx, dy) = kernels.tap(k);
    let mut samples = vec![0.0f32; w * h * 3];
    for i in 0..w * h {
        samples[3 * i] = dx[i];
        samples[3 * i + 1] = dy[i];
    }
    Image::with_mask(w, h, 3, samples, kernels.valid().to_vec())
        .expect("kernel dimensions are valid")
}

// ---------------------------------------------------------------------------
// Dataset synthesis and batch processing
// ---------------------------------------------------------------------------

const SPLITS: [&str; 5] = ["train", "train", "train", "val", "test"];

/// Top-level record of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub scenes: usize,
    pub captures: Vec<String>,
}

/// Generates `scenes` captures under `out`, split train/val/test in a
/// fixed 3:1:1 rotation. Every scene derives its own seed from the batch
/// seed and its index, so parallel generation cannot change any output.
pub fn run_synth(
    out: &Path,
    scenes: usize,
    seed: u64,
    recipe: &CaptureRecipe,
) -> Result<SynthManifest, PipelineError> {
    if scenes == 0 {
        return Err(PipelineError::Config("at least one scene is required".into()));
    }
    let rels: Vec<PathBuf> = (0..scenes)
        .map(|i| Path::new(SPLITS[i % SPLITS.len()]).join(format!("scene_{i:04}")))
        .collect();
    rels.par_iter().enumerate().try_for_each(|(i, rel)| {
        let capture = stage("synth", synthesize(recipe, derive_seed(seed, i as u64)))?;
        write_capture(&out.join(rel), &capture)
    })?;
    let manifest =
        SynthManifest { seed, scenes, captures: rels.iter().map(|r| slashed(r)).collect() };
    write_json(&out.join("synth.json"), &manifest)?;
    Ok(manifest)
}

fn slashed(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Capture directories (holders of `manifest.json`) below `root`, as
/// sorted relative paths.
pub fn find_captures(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| fs_err(&dir, e))? {
            let entry = entry.map_err(|e| fs_err(&dir, e))?;
            let path = entry.path();
            if !path.is_dir() {
                continue;
            }
            if path.join("manifest.json").is_file() {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                found.push(rel.to_path_buf());
            } else {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Runs the full pipeline over `input`: either a single capture directory
/// or a tree of them, mirrored under `out`. Batch captures are processed
/// in parallel; their outputs are independent, so the results match a
/// sequential run bit for bit.
pub fn run_pipeline(
    input: &Path,
    out: &Path,
    config: &PipelineConfig,
) -> Result<Vec<(PathBuf, Option<Metrics>)>, PipelineError> {
    if input.join("manifest.json").is_file() {
        let metrics = run_capture(input, out, config, PipelineGoal::Full)?;
        return Ok(vec![(out.to_path_buf(), metrics)]);
    }
    let captures = find_captures(input)?;
    if captures.is_empty() {
        return Err(PipelineError::Config(format!(
            "no capture directories under {}",
            input.display()
        )));
    }
    captures
        .par_iter()
        .map(|rel| {
            let dst = out.join(rel);
            let metrics = run_capture(&input.join(rel), &dst, config, PipelineGoal::Full)?;
            Ok((dst, metrics))
        })
        .collect()
}

/// Applies the `HCD_THREADS` cap to the global worker pool. Call once at
/// process start.
pub fn configure_threads_from_env() -> Result<(), PipelineError> {
    let value = match std::env::var("HCD_THREADS") {
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(PipelineError::Config(format!("HCD_THREADS: {e}"))),
        Ok(v) => v,
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            PipelineError::Config(format!(
                "HCD_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// Evaluation reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub metrics: Option<Metrics>,
}

fn looks_like_results_dir(dir: &Path) -> bool {
    ["metrics.json", "final.pfm", "wide_deblurred.pfm", "align.json"]
        .iter()
        .any(|name| dir.join(name).is_file())
}

fn read_eval_row(id: String, dir: &Path) -> Result<EvalRow, PipelineError> {
    let path = dir.join("metrics.json");
    if !path.is_file() {
        return Ok(EvalRow { id, metrics: None });
    }
    let text = fs::read_to_string(&path).map_err(|e| fs_err(&path, e))?;
    let metrics = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    Ok(EvalRow { id, metrics: Some(metrics) })
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Gathers one evaluation row per results directory. An input that is
/// itself a results directory contributes one row; otherwise every
/// results directory below it contributes one, labelled by relative
/// path. Rows sort by label; missing `metrics.json` marks a row absent.
pub fn collect_eval_rows(inputs: &[PathBuf]) -> Result<Vec<EvalRow>, PipelineError> {
    let mut rows = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            return Err(PipelineError::Config(format!(
                "{} is not a directory",
                input.display()
            )));
        }
        if looks_like_results_dir(input) {
            rows.push(read_eval_row(dir_label(input), input)?);
            continue;
        }
        let mut nested = Vec::new();
        let mut stack = vec![input.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| fs_err(&dir, e))? {
                let entry = entry.map_err(|e| fs_err(&dir, e))?;
                let path = entry.path();
                if !path.is_dir() {
                    continue;
                }
                if looks_like_results_dir(&path) {
                    nested.push(path);
                } else {
                    stack.push(path);
                }
            }
        }
        if nested.is_empty() {
            rows.push(EvalRow { id: dir_label(input), metrics: None });
            continue;
        }
        let prefix = if inputs.len() > 1 { format!("{}/", dir_label(input)) } else { String::new() };
        for dir in nested {
            let rel = dir.strip_prefix(input).expect("walk stays under the input");
            rows.push(read_eval_row(format!("{prefix}{}", slashed(rel)), &dir)?);
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(rows)
}

const EVAL_COLUMNS: [&str; 6] = [
    "psnr_blurred",
    "psnr_deblurred",
    "psnr_final",
    "ssim_blurred",
    "ssim_deblurred",
    "ssim_final",
];

fn eval_values(metrics: &Metrics) -> [Option<f64>; 6] {
    [
        metrics.psnr_blurred,
        metrics.psnr_deblurred,
        metrics.psnr_final,
        metrics.ssim_blurred,
        metrics.ssim_deblurred,
        metrics.ssim_final,
    ]
}

fn eval_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => v.to_string(),
        None => "absent".into(),
    }
}

/// Per-column arithmetic means over the rows that carry a value.
fn eval_means(rows: &[EvalRow]) -> [Option<f64>; 6] {
    let mut means = [None; 6];
    for (col, mean) in means.iter_mut().enumerate() {
        let values: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.metrics.as_ref().and_then(|m| eval_values(m)[col]))
            .collect();
        if !values.is_empty() {
            *mean = Some(values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    means
}

/// Renders the evaluation table with one row per capture plus a mean row.
pub fn render_report(rows: &[EvalRow], format: ReportFormat) -> String {
    let means = eval_means(rows);
    let mut text = String::new();
    match format {
        ReportFormat::Csv => {
            text.push_str("capture");
            for col in EVAL_COLUMNS {
                text.push(',');
                text.push_str(col);
            }
            text.push('\n');
            for row in rows {
                text.push_str(&row.id);
                let values =
                    row.metrics.as_ref().map(eval_values).unwrap_or([None; 6]);
                for v in values {
                    text.push(',');
                    text.push_str(&eval_cell(v));
                }
                text.push('\n');
            }
            text.push_str("mean");
            for v in means {
                text.push(',');
                text.push_str(&eval_cell(v));
            }
            text.push('\n');
        }
        ReportFormat::Markdown => {
            text.push_str("| capture |");
            for col in EVAL_COLUMNS {
                text.push_str(&format!(" {col} |"));
            }
            text.push_str("\n|---|");
            for _ in EVAL_COLUMNS {
                text.push_str("---|");
            }
            text.push('\n');
            for row in rows {
                text.push_str(&format!("| {} |", row.id));
                let values =
                    row.metrics.as_ref().map(eval_values).unwrap_or([None; 6]);
                for v in values {
                    text.push_str(&format!(" {} |", eval_cell(v)));
                }
                text.push('\n');
            }
            text.push_str("| mean |");
            for v in means {
                text.push_str(&format!(" {} |", eval_cell(v)));
            }
            text.push('\n');
        }
    }
    text
}

/// Collects rows from `inputs`, renders the report, and optionally writes
/// it under `out` as `report.csv` or `report.md`.
pub fn run_eval(
    inputs: &[PathBuf],
    format: ReportFormat,
    out: Option<&Path>,
) -> Result<String, PipelineError> {
    if inputs.is_empty() {
        return Err(PipelineError::Config("at least one results directory is required".into()));
    }
    let rows = collect_eval_rows(inputs)?;
    let text = render_report(&rows, format);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| fs_err(dir, e))?;
        let path = dir.join(format.file_name());
        fs::write(&path, &text).map_err(|e| fs_err(&path, e))?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{
        render_burst_at, render_wide_at, synth_wide, CaptureNoise, MotionScript, NoiseParams,
    };

    fn small_recipe() -> CaptureRecipe {
        CaptureRecipe {
            wide_dims: (96, 96),
            focal_wide: 96.0,
            translation_px: 8.0,
            noise: CaptureNoise {
                wide: NoiseParams::gaussian(0.005),
                burst: NoiseParams::gaussian(0.005),
            },
            ..CaptureRecipe::default()
        }
    }

    fn fast_config() -> PipelineConfig {
        PipelineConfig { iterations: 5, ..PipelineConfig::default() }
    }

    #[test]
    fn depth_spec_round_trips_and_rejects_garbage() {
        let spec: DepthSpec = "0.5:20:8".parse().unwrap();
        assert_eq!(spec, DepthSpec { min: 0.5, max: 20.0, count: 8 });
        assert_eq!(spec.to_string(), "0.5:20:8");
        assert_eq!(spec.candidates().unwrap().depths().len(), 8);
        assert!("0.5:20".parse::<DepthSpec>().is_err());
        assert!("a:b:c".parse::<DepthSpec>().is_err());
        assert!("20:0.5:8".parse::<DepthSpec>().unwrap().candidates().is_err());
    }

    #[test]
    fn solver_and_report_flags_parse() {
        assert_eq!("rl".parse::<SolverChoice>().unwrap(), SolverChoice::Rl);
        assert_eq!("cg".parse::<SolverChoice>().unwrap(), SolverChoice::Cg);
        assert!("lbfgs".parse::<SolverChoice>().is_err());
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert!("html".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn exit_codes_split_stage_failures_from_everything_else() {
        let stage_err = PipelineError::Stage { stage: "deblur", message: "diverged".into() };
        assert_eq!(stage_err.exit_code(), 1);
        assert_eq!(PipelineError::Config("bad".into()).exit_code(), 2);
        let missing = read_pfm(Path::new("/nonexistent/file.pfm")).unwrap_err();
        assert_eq!(PipelineError::from(missing).exit_code(), 2);
    }

    #[test]
    fn synth_writes_the_split_layout_and_records_the_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = run_synth(tmp.path(), 5, 11, &small_recipe()).unwrap();
        assert_eq!(
            manifest.captures,
            vec![
                "train/scene_0000",
                "train/scene_0001",
                "train/scene_0002",
                "val/scene_0003",
                "test/scene_0004"
            ]
        );
        for rel in &manifest.captures {
            let dir = tmp.path().join(rel);
            assert!(dir.join("wide.pfm").is_file());
            assert!(dir.join("gt.pfm").is_file());
            assert!(dir.join("manifest.json").is_file());
            assert!(dir.join("burst").join("000.pfm").is_file());
        }
        let recorded: SynthManifest =
            serde_json::from_str(&fs::read_to_string(tmp.path().join("synth.json")).unwrap())
                .unwrap();
        assert_eq!(recorded.seed, 11);
        assert_eq!(recorded.scenes, 5);

        let found = find_captures(tmp.path()).unwrap();
        let found: Vec<String> = found.iter().map(|p| slashed(p)).collect();
        let mut expected = manifest.captures.clone();
        expected.sort();
        assert_eq!(found, expected);
    }

    #[test]
    fn repeated_synth_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        run_synth(&a, 2, 33, &small_recipe()).unwrap();
        run_synth(&b, 2, 33, &small_recipe()).unwrap();
        for rel in ["train/scene_0000/wide.pfm", "train/scene_0001/burst/002.pfm", "synth.json"] {
            let left = fs::read(a.join(rel)).unwrap();
            let right = fs::read(b.join(rel)).unwrap();
            assert_eq!(left, right, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn full_run_writes_every_artifact_and_scores_against_ground_truth() {
        let tmp = tempfile::tempdir().unwrap();
        let capture_dir = tmp.path().join("capture");
        let capture = synthesize(&small_recipe(), 5).unwrap();
        write_capture(&capture_dir, &capture).unwrap();

        let out = tmp.path().join("results");
        let metrics =
            run_capture(&capture_dir, &out, &fast_config(), PipelineGoal::Full).unwrap().unwrap();

        for name in [
            "align.json",
            "flows/flow_00.pfm",
            "flows/flow_00.conf.pfm",
            "kernels/tap_0.pfm",
            "kernels/tap_8.pfm",
            "kernels/meta.json",
            "kernels/streaks.png",
            "wide_deblurred.pfm",
            "solver.json",
            "merged.pfm",
            "gate.pfm",
            "weights/frame_00.pfm",
            "final.pfm",
            "metrics.json",
        ] {
            assert!(out.join(name).is_file(), "missing artifact {name}");
        }

        let t = metrics.timings;
        for (name, v) in [
            ("align", t.align),
            ("flow", t.flow),
            ("trajectory", t.trajectory),
            ("kernels", t.kernels),
            ("deblur", t.deblur),
            ("merge", t.merge),
        ] {
            assert!(v > 0.0, "stage {name} has no positive duration");
        }
        assert!(metrics.psnr_blurred.is_some());
        assert!(metrics.ssim_final.is_some());
        assert_eq!(metrics.solver.name, "cg");
        assert_eq!(metrics.solver.lambda, Some(CG_DEFAULT_LAMBDA));

        let parsed: Metrics =
            serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(parsed.psnr_final, metrics.psnr_final);
    }

    #[test]
    fn partial_goals_emit_only_their_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let capture_dir = tmp.path().join("capture");
        write_capture(&capture_dir, &synthesize(&small_recipe(), 6).unwrap()).unwrap();

        let out = tmp.path().join("align_only");
        let metrics =
            run_capture(&capture_dir, &out, &fast_config(), PipelineGoal::Align).unwrap();
        assert!(metrics.is_none());
        assert!(out.join("align.json").is_file());
        assert!(!out.join("kernels").exists());
        assert!(!out.join("wide_deblurred.pfm").exists());
        assert!(!out.join("metrics.json").exists());

        let out = tmp.path().join("deblur_only");
        run_capture(&capture_dir, &out, &fast_config(), PipelineGoal::Deblur).unwrap();
        assert!(out.join("wide_deblurred.pfm").is_file());
        assert!(out.join("solver.json").is_file());
        assert!(!out.join("align.json").exists());
        assert!(!out.join("final.pfm").exists());

        let out = tmp.path().join("merge_only");
        run_capture(&capture_dir, &out, &fast_config(), PipelineGoal::Merge).unwrap();
        assert!(out.join("merged.pfm").is_file());
        assert!(out.join("gate.pfm").is_file());
        assert!(out.join("final.pfm").is_file());
        assert!(!out.join("wide_deblurred.pfm").exists());
    }

    #[test]
    fn static_capture_deblurs_to_nearly_the_input() {
        let recipe = small_recipe();
        let (scene, _, manifest, subframes) = crate::capture::random_capture_setup(&recipe, 9)
            .expect("setup draws a valid capture");
        let script = MotionScript::stationary(manifest.wide_exposure.1);
        let (wide, gt) = synth_wide(&scene, &script, &manifest, subframes, 42).unwrap();
        let burst = crate::capture::synth_burst(&scene, &script, &manifest, 43).unwrap();

        // RL on an identity operator has the observation as an exact fixed
        // point, so suppressed kernels mean bit-level pass-through.
        let config = PipelineConfig { solver: SolverChoice::Rl, iterations: 5, ..Default::default() };
        let outputs =
            run_stages(&wide, &burst.frames, &manifest, &config, PipelineGoal::Full).unwrap();
        let blurred = psnr(&wide, &gt).unwrap();
        let deblurred = psnr(outputs.deblurred.as_ref().unwrap(), &gt).unwrap();
        assert!(
            (deblurred - blurred).abs() < 0.1,
            "static capture should pass through: blurred {blurred:.2} dB vs deblurred {deblurred:.2} dB"
        );
    }

    #[test]
    fn scripted_blur_improves_under_the_full_pipeline() {
        let capture = synthesize(&small_recipe(), 17).unwrap();
        let outputs = run_stages(
            &capture.wide,
            &capture.burst.frames,
            &capture.manifest,
            &PipelineConfig::default(),
            PipelineGoal::Full,
        )
        .unwrap();
        let blurred = psnr(&capture.wide, &capture.gt).unwrap();
        let deblurred = psnr(outputs.deblurred.as_ref().unwrap(), &capture.gt).unwrap();
        assert!(
            deblurred > blurred,
            "deblurring should improve a scripted blur: {blurred:.2} dB -> {deblurred:.2} dB"
        );
    }

    #[test]
    fn batch_pipeline_mirrors_the_capture_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        run_synth(&data, 2, 21, &small_recipe()).unwrap();
        let out = tmp.path().join("results");
        let results = run_pipeline(&data, &out, &fast_config()).unwrap();
        assert_eq!(results.len(), 2);
        assert!(out.join("train/scene_0000/final.pfm").is_file());
        assert!(out.join("train/scene_0001/metrics.json").is_file());
        assert!(results.iter().all(|(_, m)| m.is_some()));
    }

    #[test]
    fn pipeline_on_an_empty_tree_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = run_pipeline(tmp.path(), &tmp.path().join("out"), &fast_config()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    fn fake_metrics(psnr_b: f64, psnr_d: f64, psnr_f: f64) -> Metrics {
        Metrics {
            depth: 2.0,
            solver: SolverSummary { name: "rl".into(), iterations: 30, lambda: None },
            psnr_blurred: Some(psnr_b),
            psnr_deblurred: Some(psnr_d),
            psnr_final: Some(psnr_f),
            ssim_blurred: Some(0.5),
            ssim_deblurred: Some(0.6),
            ssim_final: Some(0.7),
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn eval_report_sorts_rows_marks_absent_and_averages_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let b = tmp.path().join("b_scene");
        let a = tmp.path().join("a_scene");
        let missing = tmp.path().join("broken_scene");
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        fs::create_dir_all(&missing).unwrap();
        write_json(&a.join("metrics.json"), &fake_metrics(20.0, 23.0, 24.0)).unwrap();
        write_json(&b.join("metrics.json"), &fake_metrics(21.0, 22.0, 25.0)).unwrap();
        // A results directory that lost its metrics file still gets a row.
        fs::write(missing.join("final.pfm"), b"placeholder").unwrap();

        let inputs = vec![b, missing.clone(), a];
        let report = run_eval(&inputs, ReportFormat::Csv, None).unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("capture,psnr_blurred,"));
        assert!(lines[1].starts_with("a_scene,"));
        assert!(lines[2].starts_with("b_scene,"));
        assert_eq!(lines[3], "broken_scene,absent,absent,absent,absent,absent,absent");
        let mean_cells: Vec<&str> = lines[4].split(',').collect();
        assert_eq!(mean_cells[0], "mean");
        assert_eq!(mean_cells[1].parse::<f64>().unwrap(), 20.5);
        assert_eq!(mean_cells[3].parse::<f64>().unwrap(), 24.5);

        let again = run_eval(&inputs, ReportFormat::Csv, None).unwrap();
        assert_eq!(report, again, "re-running on unchanged inputs must be byte-identical");

        let md = run_eval(&inputs, ReportFormat::Markdown, Some(tmp.path())).unwrap();
        assert!(md.starts_with("| capture |"));
        assert!(md.contains("| mean |"));
        assert_eq!(fs::read_to_string(tmp.path().join("report.md")).unwrap(), md);
    }

    #[test]
    fn eval_walks_nested_results_trees() {
        let tmp = tempfile::tempdir().unwrap();
        for rel in ["train/scene_0000", "val/scene_0001"] {
            let dir = tmp.path().join(rel);
            fs::create_dir_all(&dir).unwrap();
            write_json(&dir.join("metrics.json"), &fake_metrics(20.0, 22.0, 23.0)).unwrap();
        }
        let report =
            run_eval(&[tmp.path().to_path_buf()], ReportFormat::Csv, None).unwrap();
        assert!(report.contains("train/scene_0000,"));
        assert!(report.contains("val/scene_0001,"));
    }

    #[test]
    fn rig_scale_requires_an_integer_focal_ratio() {
        let capture = synthesize(&small_recipe(), 3).unwrap();
        let mut manifest = capture.manifest.clone();
        assert_eq!(rig_scale(&manifest).unwrap(), 6);
        manifest.rig.k_ultra[0][0] *= 1.07;
        assert!(rig_scale(&manifest).is_err());
    }

    #[test]
    fn stage_failures_keep_partial_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let capture_dir = tmp.path().join("capture");
        write_capture(&capture_dir, &synthesize(&small_recipe(), 8).unwrap()).unwrap();
        // An unreachable depth sweep (single candidate far beyond the
        // scene) still aligns; to force a stage failure use a flow window
        // larger than the burst frames allow.
        let mut config = fast_config();
        config.flow.window_radius = 4000;
        let out = tmp.path().join("broken");
        let err = run_capture(&capture_dir, &out, &config, PipelineGoal::Full).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(matches!(err, PipelineError::Stage { stage: "flow", .. }));
        assert!(out.join("align.json").is_file(), "artifacts before the failure survive");
        assert!(!out.join("metrics.json").exists());
    }

    #[test]
    fn render_helpers_cover_static_frames() {
        // Direct render sanity: a stationary script shows the same scene to
        // the wide camera at any instant.
        let recipe = small_recipe();
        let (scene, _, manifest, _) = crate::capture::random_capture_setup(&recipe, 2).unwrap();
        let script = MotionScript::stationary(manifest.wide_exposure.1);
        let early = render_wide_at(&scene, &script, &manifest, 0.0);
        let late = render_wide_at(&scene, &script, &manifest, manifest.wide_exposure.1);
        assert_eq!(early, late);
        let burst_frame =
            render_burst_at(&scene, &script, &manifest, manifest.anchor_time()).unwrap();
        assert_eq!(burst_frame.width(), manifest.burst_dims.0);
    }
}
