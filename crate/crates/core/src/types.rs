//! Domain types shared by every stage of the pipeline.
//!
//! All values are held as `f64` in memory. The on-disk frame format stores
//! point and box attributes as `f32`, so only frames whose values are
//! `f32`-representable survive a write/read cycle unchanged; the synthetic
//! generator always emits such frames.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r -= 2.0 * PI;
    }
    r
}

/// Smallest absolute difference between two angles, in `[0, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && (0.0..=1.0).contains(&self.intensity)
    }
}

/// Planar ego pose (SE(2)): maps ego-frame coordinates into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub tx: f64,
    pub ty: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D {
        tx: 0.0,
        ty: 0.0,
        yaw: 0.0,
    };

    pub fn new(tx: f64, ty: f64, yaw: f64) -> Self {
        Self {
            tx,
            ty,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        Pose2D::new(-(c * self.tx + s * self.ty), s * self.tx - c * self.ty, -self.yaw)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (tx, ty) = self.apply(other.tx, other.ty);
        Pose2D::new(tx, ty, self.yaw + other.yaw)
    }

    /// Transform taking coordinates in the `prev` ego frame into the `cur`
    /// ego frame, i.e. the pose of frame t-1 expressed in frame t.
    pub fn relative(prev: &Pose2D, cur: &Pose2D) -> Pose2D {
        cur.inverse().compose(prev)
    }
}

/// A 2.5D box: BEV center, height, size, planar yaw and planar velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let finite = [
            self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw, self.vx, self.vy,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("box has non-finite fields".into()));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::Data(format!(
                "box sizes must be positive, got ({}, {}, {})",
                self.w, self.l, self.h
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Data(format!(
                "class id {} out of range for {num_classes} classes",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// One LiDAR sweep with optional odometry and ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloudFrame {
    pub points: Vec<Point>,
    pub timestamp: f64,
    pub ego_pose: Option<Pose2D>,
    pub gt_boxes: Vec<Box3D>,
}

/// An ordered run of frames sharing one class vocabulary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneSequence {
    pub frames: Vec<PointCloudFrame>,
    pub class_names: Vec<String>,
}

impl SceneSequence {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("sequence has no class names".into()));
        }
        for pair in self.frames.windows(2) {
            if !(pair[1].timestamp > pair[0].timestamp) {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing: {} then {}",
                    pair[0].timestamp, pair[1].timestamp
                )));
            }
        }
        for frame in &self.frames {
            if let Some(p) = frame.points.iter().find(|p| !p.is_valid()) {
                return Err(Error::Data(format!("invalid point {p:?}")));
            }
            for b in &frame.gt_boxes {
                b.validate(self.num_classes())?;
            }
        }
        Ok(())
    }
}
