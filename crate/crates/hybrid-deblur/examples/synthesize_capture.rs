//! Generate one synthetic capture and inspect what the simulator produced.
//!
//! A capture pairs a motion-blurred long exposure from the wide camera
//! with a burst of short sharp frames from the ultra-wide camera, plus the
//! clean ground-truth frame the pipeline is scored against.
//!
//!     cargo run --release --example synthesize_capture [SEED] [OUT_DIR]

use std::env;
use std::path::PathBuf;

use hybrid_deblur::capture::{synthesize, CaptureRecipe};
use hybrid_deblur::image::psnr;
use hybrid_deblur::pipeline::write_capture;

fn main() {
    let mut args = env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("SEED must be an integer")).unwrap_or(7);
    let out: PathBuf = args.next().map(Into::into).unwrap_or_else(|| "target/capture_demo".into());

    let recipe = CaptureRecipe::default();
    let capture = synthesize(&recipe, seed).expect("default recipe always synthesizes");
    let m = &capture.manifest;

    let (ts, te) = m.wide_exposure;
    println!("seed {seed}");
    println!(
        "wide frame     {}x{} px, exposure {:.1} ms over {} rendered sub-frames",
        m.wide_dims.0,
        m.wide_dims.1,
        (te - ts) * 1e3,
        capture.subframes,
    );
    println!(
        "burst          {} frames of {}x{} px at 60 FPS, each {:.1} ms",
        m.frames,
        m.burst_dims.0,
        m.burst_dims.1,
        (m.burst_windows[0].1 - m.burst_windows[0].0) * 1e3,
    );
    println!("scene plane    {:.2} m away, baseline {:.0} mm", m.depth, recipe.baseline * 1e3);

    let blurred = psnr(&capture.wide, &capture.gt).expect("same shape");
    println!("blur damage    wide vs ground truth: {blurred:.2} dB PSNR");

    write_capture(&out, &capture).expect("write capture directory");
    println!("wrote          {}", out.display());
    println!("               wide.pfm, gt.pfm, manifest.json, burst/*.pfm");
}
