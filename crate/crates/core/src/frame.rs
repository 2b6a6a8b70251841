//! Per-frame tracker output consumed by the mapper.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project_point, Intrinsics, Pose};
use crate::image::Image;

/// Maximum disagreement (pixels) between a tracked point's stored pixel and
/// its reprojection.
pub const TRACK_REPROJECTION_TOLERANCE: f64 = 2.0;

/// A sparse point reported by the tracker for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub world: Vector3<f64>,
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// One posed frame with its image and tracked points.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub index: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub image: Image,
    pub tracked_points: Vec<TrackedPoint>,
}

impl FrameInput {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.image.dims() != (self.intrinsics.width, self.intrinsics.height) {
            return Err(Error::InvalidImage(format!(
                "frame {} image is {:?}, intrinsics say {}x{}",
                self.index,
                self.image.dims(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        for (i, tp) in self.tracked_points.iter().enumerate() {
            if !(tp.depth > 0.0) {
                return Err(Error::NonPositiveInput(format!(
                    "frame {} tracked point {i} has depth {}",
                    self.index, tp.depth
                )));
            }
            let (px, _) = project_point(&self.pose, &self.intrinsics, &tp.world)?;
            let err = (px - tp.pixel).norm();
            if err > TRACK_REPROJECTION_TOLERANCE {
                return Err(Error::InvalidImage(format!(
                    "frame {} tracked point {i} reprojects {err:.2} px from its pixel",
                    self.index
                )));
            }
        }
        Ok(())
    }
}
