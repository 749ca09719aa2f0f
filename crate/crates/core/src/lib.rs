//! Stereo thermal SLAM engine.
//!
//! The crate is organised as a pipeline of loosely coupled stages:
//!
//! * [`preproc`] turns raw 16-bit radiometric frames into temporally stable
//!   8-bit images (percentile stretch with EMA-smoothed bounds, then CLAHE).
//! * [`features`] holds keypoints, real and binarized descriptors, Hamming
//!   matching, a built-in corner detector and the homography descriptor loss.
//! * [`dynfilter`] suppresses keypoints on independently moving objects by
//!   combining semantic masks with an epipolar consistency test.
//! * [`tracking`] estimates frame poses with photometric coarse alignment
//!   followed by descriptor matching and PnP refinement.
//! * [`mapping`] owns keyframes, map points, covisibility and bundle
//!   adjustment.
//! * [`loopclose`] grows a binary vocabulary online, retrieves loop
//!   candidates, verifies them and corrects drift with a Sim(3) pose graph.
//! * [`evalsim`] generates synthetic stereo sequences with ground truth and
//!   computes trajectory metrics.
//! * [`pipeline`] wires everything into a runnable system.

pub mod dynfilter;
pub mod error;
pub mod evalsim;
pub mod features;
pub mod geometry;
pub mod image;
pub mod loopclose;
pub mod mapping;
pub mod pipeline;
pub mod preproc;
pub mod tracking;

pub use error::{Error, Result};
