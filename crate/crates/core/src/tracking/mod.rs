//! Frame-to-frame pose estimation: constant-velocity prediction, direct
//! photometric coarse alignment, descriptor matching by reprojection and a
//! PnP refinement with an outlier re-fit.

mod matching;
mod motion;
mod photometric;
mod pnp;

pub use matching::{descriptor_track, MapCandidate, ProjectionMatch};
pub use motion::{predict_pose, MotionModel};
pub use photometric::{photometric_align, photometric_cost, PhotoParams, PhotoPoint};
pub use pnp::{lm_pose, refine_pnp, reprojection_jacobian, PnpParams, TrackResult, TrackStatus};

/// Tracking parameters shared by the matching and refinement stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingParams {
    /// Search radius around a projected map point, pixels.
    pub radius: f64,
    /// Maximum Hamming distance of an accepted match.
    pub tau_h: u32,
    pub pnp: PnpParams,
    pub photo: PhotoParams,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            radius: 15.0,
            tau_h: 64,
            pnp: PnpParams::default(),
            photo: PhotoParams::default(),
        }
    }
}
