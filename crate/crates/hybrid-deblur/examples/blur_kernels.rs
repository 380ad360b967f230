//! Estimate per-pixel blur kernels from the burst and compare them to the
//! motion script's exact answer.
//!
//! Burst frames are tracked pairwise, the flows are chained into per-pixel
//! trajectories anchored at the central frame, and the trajectories are
//! mapped into the wide frame and resampled at nine fixed timestamps
//! spanning the exposure. A streak visualization lands in OUT_DIR.
//!
//!     cargo run --release --example blur_kernels [SEED] [OUT_DIR]

use std::env;
use std::path::PathBuf;

use hybrid_deblur::capture::{ground_truth_kernel_field, synthesize, CaptureRecipe};
use hybrid_deblur::io::write_png16;
use hybrid_deblur::pipeline::{run_stages, PipelineConfig, PipelineGoal};
use hybrid_deblur::trajectory::{render_kernel_streaks, KERNEL_TAPS};

fn main() {
    let mut args = env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("SEED must be an integer")).unwrap_or(2);
    let out: PathBuf = args.next().map(Into::into).unwrap_or_else(|| "target/kernel_demo".into());

    let recipe = CaptureRecipe::default().translation_dominant();
    let capture = synthesize(&recipe, seed).unwrap();

    let outputs = run_stages(
        &capture.wide,
        &capture.burst.frames,
        &capture.manifest,
        &PipelineConfig::default(),
        PipelineGoal::Kernels,
    )
    .unwrap();
    let estimated = outputs.kernels.as_ref().unwrap();
    let oracle = ground_truth_kernel_field(&capture.script, &capture.manifest);

    let (w, h) = (estimated.width(), estimated.height());
    let margin = 16usize;
    println!("per-pixel blur kernels, {} taps per pixel\n", KERNEL_TAPS.len());
    println!("tap   time    mean endpoint error (interior px)");
    for tap in 0..KERNEL_TAPS.len() {
        let mut epe = 0.0f64;
        let mut n = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (ex, ey) = estimated.displacement(x, y, tap);
                let (ox, oy) = oracle.displacement(x, y, tap);
                epe += (ex as f64 - ox as f64).hypot(ey as f64 - oy as f64);
                n += 1;
            }
        }
        println!("{tap:3}   {:+.3}  {:8.3}", KERNEL_TAPS[tap], epe / n as f64);
    }
    println!(
        "\nlongest streak: estimated {:.1} px, oracle {:.1} px",
        estimated.max_extent(),
        oracle.max_extent()
    );

    std::fs::create_dir_all(&out).unwrap();
    write_png16(&out.join("streaks_estimated.png"), &render_kernel_streaks(estimated, 16))
        .unwrap();
    write_png16(&out.join("streaks_oracle.png"), &render_kernel_streaks(&oracle, 16)).unwrap();
    println!("wrote streak plots under {}", out.display());
}
