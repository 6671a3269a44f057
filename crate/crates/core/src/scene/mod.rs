//! Depth frames, oriented point clouds and their sources: 7-scenes style
//! datasets on disk and a deterministic synthetic renderer.

mod cloud;
pub mod rooms;
mod sevenscenes;
mod synth;

pub use cloud::{depth_to_cloud, estimate_normals, NormalStatus, DEFAULT_NORMAL_RADIUS};
pub use sevenscenes::{
    decode_depth_png, encode_depth_png, format_pose, list_sevenscenes_frames, load_sevenscenes_frame,
    load_sevenscenes_frame_with, parse_intrinsics, parse_pose, write_sevenscenes_frame,
};
pub use synth::{parse_scene_spec, synth_scene, Primitive, SceneSpec, SynthOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Pose, Vec3};

/// Pinhole intrinsics of a depth sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Meters per stored depth unit.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    /// Kinect intrinsics used by the 7-scenes recordings (millimeter depth).
    pub fn seven_scenes() -> Self {
        Self { fx: 585.0, fy: 585.0, cx: 320.0, cy: 240.0, width: 640, height: 480, depth_scale: 0.001 }
    }

    /// A 160×120 sensor with a Kinect-like field of view.
    pub fn desk() -> Self {
        Self { fx: 140.0, fy: 140.0, cx: 79.5, cy: 59.5, width: 160, height: 120, depth_scale: 0.001 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0
            && [self.fx, self.fy, self.cx, self.cy, self.depth_scale].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point in front of the sensor.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// A single depth image. Invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeFrame {
    /// Row-major, `width * height` stored depth units.
    pub depth: Vec<u16>,
    pub intrinsics: CameraIntrinsics,
    pub pose_gt: Option<Pose>,
    pub frame_id: String,
}

impl RangeFrame {
    pub fn new(frame_id: impl Into<String>, intrinsics: CameraIntrinsics, depth: Vec<u16>) -> Result<Self> {
        intrinsics.validate()?;
        let expected = intrinsics.width * intrinsics.height;
        if depth.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: depth.len() });
        }
        Ok(Self { depth, intrinsics, pose_gt: None, frame_id: frame_id.into() })
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose_gt = Some(pose);
        self
    }

    pub fn depth_at(&self, u: usize, v: usize) -> u16 {
        self.depth[v * self.intrinsics.width + u]
    }

    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d != 0).count()
    }
}

/// Back-map from cloud points to the pixels they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelIndex {
    pub intrinsics: CameraIntrinsics,
    /// Linear pixel index (`v * width + u`) of each point.
    pub pixels: Vec<u32>,
}

impl PixelIndex {
    pub fn uv(&self, point: usize) -> (usize, usize) {
        let p = self.pixels[point] as usize;
        (p % self.intrinsics.width, p / self.intrinsics.width)
    }
}

/// 3-D points in the sensor frame with optional normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub pixel_index: Option<PixelIndex>,
    /// Filled by [`estimate_normals`].
    pub normal_status: Option<Vec<NormalStatus>>,
    /// Estimated surface area (m²) represented by each point; filled by
    /// [`estimate_normals`].
    pub point_area: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self { points, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn normals(&self) -> Result<&[Vec3]> {
        self.normals
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("point cloud has no normals".into()))
    }

    /// Area represented by point `i`; 0 before normals are estimated.
    pub fn area(&self, i: usize) -> f64 {
        self.point_area.as_ref().map_or(0.0, |a| a[i])
    }
}
