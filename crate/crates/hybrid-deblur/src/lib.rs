//! Hybrid two-camera deblurring.
//!
//! A long exposure from the main camera is paired with a synchronized
//! short-exposure burst from a second, wider camera. The burst frames are
//! sharp but small and noisy; the wide frame is clean but motion blurred.
//! This crate aligns the two fields of view, tracks pixel motion through
//! the burst, converts the trajectories into per-pixel blur kernels, and
//! then removes the blur non-blindly and fuses the burst detail back in.
//!
//! The crate also ships a capture simulator so every stage can be exercised
//! and measured against exact closed-form ground truth.

pub mod align;
pub mod capture;
pub mod deblur;
pub mod flow;
pub mod image;
pub mod io;
pub mod merge;
pub mod pipeline;
pub mod trajectory;
