use crate::geometry::{project_pinhole, CameraIntrinsics, GeometryError, Rotation3, Transform3D, Vec3};
use serde::{Deserialize, Serialize};

use super::SceneError;

/// Verged stereo pair. Camera 2 sits `baseline` meters along camera 1's +x
/// and is rotated by `-theta` about y, so both optical axes cross at
/// depth `baseline / tan(theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub baseline: f64,
    pub theta: f64,
    #[serde(rename = "T_world_cam1")]
    pub world_from_cam1: Transform3D,
}

pub type PixelPair = ((f64, f64), (f64, f64));

impl StereoRig {
    pub fn new(left: CameraIntrinsics, right: CameraIntrinsics, baseline: f64, theta: f64, world_from_cam1: Transform3D) -> Result<Self, SceneError> {
        let rig = Self { left, right, baseline, theta, world_from_cam1 };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.left.validate()?;
        self.right.validate()?;
        if !(self.baseline > 0.0) {
            return Err(SceneError::InvalidRig(format!("baseline {} must be > 0", self.baseline)));
        }
        if !(self.theta >= 0.0 && self.theta < std::f64::consts::FRAC_PI_2) {
            return Err(SceneError::InvalidRig(format!("verge angle {} outside [0, π/2)", self.theta)));
        }
        Ok(())
    }

    /// Pose of camera 2 in camera 1's frame.
    pub fn cam1_from_cam2(&self) -> Transform3D {
        Transform3D::new(Rotation3::rot_y(-self.theta), Vec3::new(self.baseline, 0.0, 0.0))
    }

    pub fn world_from_cam2(&self) -> Transform3D {
        self.world_from_cam1.compose(&self.cam1_from_cam2())
    }

    /// Principal-point-relative projections of a world point into both cameras.
    pub fn project(&self, p_world: &Vec3) -> Result<PixelPair, GeometryError> {
        let p1 = self.world_from_cam1.inverse().apply(p_world);
        let p2 = self.cam1_from_cam2().inverse().apply(&p1);
        Ok((project_pinhole(&self.left, &p1)?, project_pinhole(&self.right, &p2)?))
    }
}

/// Exact pinhole projection of a world point through both cameras of the rig.
pub fn project_to_stereo(rig: &StereoRig, p_world: &Vec3) -> Result<PixelPair, GeometryError> {
    rig.project(p_world)
}
