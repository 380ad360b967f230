//! Align the short-exposure burst onto the deblurred wide frame, merge it
//! with robust weights, and inject the recovered detail.
//!
//!     cargo run --release --example burst_merge [SEED]

use std::env;

use hybrid_deblur::capture::{synthesize, CaptureRecipe};
use hybrid_deblur::image::{downsample_avg, psnr};
use hybrid_deblur::pipeline::{run_stages, PipelineConfig, PipelineGoal};

fn main() {
    let seed: u64 = env::args()
        .nth(1)
        .map(|s| s.parse().expect("SEED must be an integer"))
        .unwrap_or(10);

    let recipe = CaptureRecipe::default();
    let capture = synthesize(&recipe, seed).unwrap();
    let outputs = run_stages(
        &capture.wide,
        &capture.burst.frames,
        &capture.manifest,
        &PipelineConfig::default(),
        PipelineGoal::Full,
    )
    .unwrap();

    let deblurred = outputs.deblurred.as_ref().unwrap();
    let merged = outputs.merged.as_ref().unwrap();
    let final_image = outputs.final_image.as_ref().unwrap();
    let gate = outputs.gate.as_ref().unwrap();
    let gt_lo = downsample_avg(&capture.gt, outputs.scale).unwrap();
    let ref_lo = downsample_avg(deblurred, outputs.scale).unwrap();

    println!(
        "seed {seed}: merging {} burst frames on a {}x{} grid ({}x downsample)\n",
        capture.burst.frames.len(),
        merged.width(),
        merged.height(),
        outputs.scale
    );
    println!("deblurred wide, downsampled   {:.2} dB vs ground truth", psnr(&ref_lo, &gt_lo).unwrap());
    println!("merged burst                  {:.2} dB vs ground truth", psnr(merged, &gt_lo).unwrap());

    let mean_gate = gate.samples().iter().map(|&v| v as f64).sum::<f64>()
        / gate.samples().len() as f64;
    println!("injection gate                {mean_gate:.3} mean (0 = keep wide, 1 = trust burst)\n");

    let p_deblur = psnr(deblurred, &capture.gt).unwrap();
    let p_final = psnr(final_image, &capture.gt).unwrap();
    println!("full-resolution wide          {p_deblur:.2} dB after deconvolution");
    println!("with injected burst detail    {p_final:.2} dB ({:+.2} dB)", p_final - p_deblur);
}
