//! Coarse, instance-agnostic TSDF that follows the camera and is thrown
//! away once the camera drifts too far from where it was created.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};
use crate::image::DepthImage;
use crate::tsdf::VoxelGrid;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackgroundParams {
    pub resolution: usize,
    pub voxel_size: f64,
    /// Distance in front of the camera, along its optical axis, of the
    /// volume centre.
    pub forward_offset: f64,
    pub reset_distance: f64,
    pub truncation_voxels: f64,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self {
            resolution: 256,
            voxel_size: 0.02,
            forward_offset: 2.56,
            reset_distance: 1.28,
            truncation_voxels: 4.0,
        }
    }
}

/// Volume centred ahead of the camera that created it, axis-aligned in its
/// own frame. `drift` moves the whole volume rigidly in the world and is the
/// identity unless odometry noise is being simulated.
#[derive(Clone, Debug)]
pub struct CoarseVolume {
    pub grid: VoxelGrid,
    pub centre: Vector3<f64>,
    pub creation_pose: Pose,
    pub drift: Pose,
}

fn anchor(camera_pose: &Pose, params: &BackgroundParams) -> Vector3<f64> {
    camera_pose.transform_point(&Vector3::new(0.0, 0.0, params.forward_offset))
}

impl CoarseVolume {
    pub fn pose(&self) -> Pose {
        self.drift.compose(&Pose::from_translation(self.centre))
    }

    /// The creating camera's pose as seen through the volume.
    pub fn frame(&self) -> Pose {
        self.drift.compose(&self.creation_pose)
    }

    /// Moves the volume by `delta`, applied on the world side.
    pub fn carry(&mut self, delta: &Pose) {
        self.drift = delta.compose(&self.drift);
    }

    pub fn truncation(&self, params: &BackgroundParams) -> f64 {
        params.truncation_voxels * self.grid.voxel_size()
    }
}

pub fn init_background(camera_pose: &Pose, params: &BackgroundParams) -> CoarseVolume {
    CoarseVolume {
        grid: VoxelGrid::new(params.resolution, params.voxel_size),
        centre: anchor(camera_pose, params),
        creation_pose: *camera_pose,
        drift: Pose::identity(),
    }
}

pub fn needs_reset(vol: &CoarseVolume, camera_pose: &Pose, params: &BackgroundParams) -> bool {
    (vol.pose().translation - anchor(camera_pose, params)).norm() > params.reset_distance
}

/// Ungated depth fusion; returns the number of updated voxels.
pub fn integrate_background(
    vol: &mut CoarseVolume,
    depth: &DepthImage,
    camera_pose: &Pose,
    k: &Intrinsics,
    params: &BackgroundParams,
) -> usize {
    let mu = vol.truncation(params);
    let pose = vol.pose();
    vol.grid.integrate(&pose, camera_pose, depth, k, mu)
}
