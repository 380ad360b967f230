//! Track pixel motion between burst frames with pyramidal matching.
//!
//! The example renders a scripted capture, estimates the flow between the
//! central burst frame and its neighbors, and scores both against the
//! motion script's exact answer.
//!
//!     cargo run --release --example optical_flow [SEED]

use std::env;

use hybrid_deblur::capture::{synthesize, CaptureRecipe};
use hybrid_deblur::flow::{estimate_flow, FlowParams};
use hybrid_deblur::trajectory::center_index;

fn main() {
    let seed: u64 =
        env::args().nth(1).map(|s| s.parse().expect("SEED must be an integer")).unwrap_or(11);

    let recipe = CaptureRecipe::default().translation_dominant();
    let capture = synthesize(&recipe, seed).unwrap();
    let frames = &capture.burst.frames;
    let center = center_index(frames.len());
    let oracle = hybrid_deblur::capture::ground_truth_burst_trajectories(
        &capture.script,
        &capture.manifest,
    )
    .unwrap();

    println!("{} burst frames, tracking from the central frame {center}\n", frames.len());
    println!("frame   mean |flow|   endpoint error (interior px)");
    let params = FlowParams::default();
    let (w, h) = (frames[0].width(), frames[0].height());
    let margin = 8usize;
    for i in 0..frames.len() {
        if i == center {
            continue;
        }
        let flow = estimate_flow(&frames[center], &frames[i], &params).unwrap();
        let truth = oracle.map(i);
        let mut mag = 0.0f64;
        let mut epe = 0.0f64;
        let mut n = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (dx, dy) = flow.get(x, y);
                let (tx, ty) = truth.get(x, y);
                mag += (dx as f64).hypot(dy as f64);
                epe += (dx as f64 - tx as f64).hypot(dy as f64 - ty as f64);
                n += 1;
            }
        }
        println!("{i:5}   {:8.3} px   {:8.3} px", mag / n as f64, epe / n as f64);
    }
}
