use crate::geometry::PoseSE3;

/// Constant-velocity model over world-to-camera poses.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MotionModel {
    pub last_pose: PoseSE3,
    /// `T_last · T_before_last⁻¹`.
    pub velocity: PoseSE3,
    pub valid: bool,
    initialized: bool,
}

impl MotionModel {
    pub fn new(pose: PoseSE3) -> Self {
        Self {
            last_pose: pose,
            velocity: PoseSE3::identity(),
            valid: false,
            initialized: true,
        }
    }

    /// Feeds the pose of the newest frame.
    pub fn update(&mut self, pose: PoseSE3) {
        if self.initialized {
            self.velocity = pose * self.last_pose.inverse();
            self.valid = true;
        }
        self.last_pose = pose;
        self.initialized = true;
    }

    /// Drops the velocity, e.g. after tracking was lost.
    pub fn reset(&mut self, pose: PoseSE3) {
        *self = Self::new(pose);
    }
}

/// `V · T_last`, or `T_last` while the velocity is unknown.
pub fn predict_pose(model: &MotionModel) -> PoseSE3 {
    if model.valid {
        model.velocity * model.last_pose
    } else {
        model.last_pose
    }
}
