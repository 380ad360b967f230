//! Deconvolve a blurred wide frame with both solvers using exact kernels
//! from the motion script, so solver behavior is isolated from kernel
//! estimation error.
//!
//!     cargo run --release --example deblur_solvers [SEED]

use std::env;

use hybrid_deblur::capture::{ground_truth_kernel_field, synthesize, CaptureRecipe};
use hybrid_deblur::deblur::{deconvolve_cg, deconvolve_rl, BlurOperator, CG_DEFAULT_LAMBDA};
use hybrid_deblur::image::psnr;

fn main() {
    let seed: u64 = env::args()
        .nth(1)
        .map(|s| s.parse().expect("SEED must be an integer"))
        .unwrap_or(5);

    let recipe = CaptureRecipe::default();
    let capture = synthesize(&recipe, seed).unwrap();
    let kernels = ground_truth_kernel_field(&capture.script, &capture.manifest);
    let op = BlurOperator::new(&kernels, 4).unwrap();

    let before = psnr(&capture.wide, &capture.gt).unwrap();
    println!("seed {seed}: blurred input {before:.2} dB, streaks up to {:.1} px\n", kernels.max_extent());

    let (rl, rl_log) = deconvolve_rl(&op, &capture.wide, 30).unwrap();
    println!(
        "richardson-lucy, 30 iterations: {:.2} dB  (data term {:.3e} -> {:.3e})",
        psnr(&rl, &capture.gt).unwrap(),
        rl_log.values.first().unwrap(),
        rl_log.values.last().unwrap()
    );

    let (cg, cg_log) = deconvolve_cg(&op, &capture.wide, CG_DEFAULT_LAMBDA, 50).unwrap();
    println!(
        "conjugate gradient, 50 iterations at lambda {CG_DEFAULT_LAMBDA}: {:.2} dB  (residual {:.3e} -> {:.3e})",
        psnr(&cg, &capture.gt).unwrap(),
        cg_log.values.first().unwrap(),
        cg_log.values.last().unwrap()
    );
}
