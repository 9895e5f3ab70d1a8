//! Global flips, rotation and scaling applied consistently to points, boxes
//! and ego poses.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{wrap_angle, PointCloudFrame, Pose2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Mirror across the x axis (y -> -y) with probability 1/2.
    pub flip_x: bool,
    /// Mirror across the y axis (x -> -x) with probability 1/2.
    pub flip_y: bool,
    /// Rotation drawn uniformly from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_x: true,
            flip_y: true,
            max_rotation: PI / 8.0,
            scale_range: (0.95, 1.05),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            max_rotation: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.max_rotation >= 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::Config(
                "augment: need max_rotation >= 0 and 0 < scale_min <= scale_max".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip_x: false,
        flip_y: false,
        rotation: 0.0,
        scale: 1.0,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip_x = cfg.flip_x && rng.gen_bool(0.5);
        let flip_y = cfg.flip_y && rng.gen_bool(0.5);
        let rotation = if cfg.max_rotation > 0.0 {
            rng.gen_range(-cfg.max_rotation..=cfg.max_rotation)
        } else {
            0.0
        };
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Self {
            flip_x,
            flip_y,
            rotation,
            scale,
        }
    }

    /// The planar linear map `s * R(theta) * Fy * Fx`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let fx = if self.flip_x { -1.0 } else { 1.0 };
        let fy = if self.flip_y { -1.0 } else { 1.0 };
        let (s, c) = self.rotation.sin_cos();
        let k = self.scale;
        [[k * c * fy, -k * s * fx], [k * s * fy, k * c * fx]]
    }

    fn map_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip_y { -x } else { x };
        let y = if self.flip_x { -y } else { y };
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (c * x - s * y, s * x + c * y);
        (self.scale * x, self.scale * y)
    }

    fn map_yaw(&self, yaw: f64) -> f64 {
        let mut a = yaw;
        if self.flip_x {
            a = -a;
        }
        if self.flip_y {
            a = PI - a;
        }
        wrap_angle(a + self.rotation)
    }

    /// Conjugates an ego pose so relative motion stays consistent with the
    /// transformed sensor data.
    fn map_pose(&self, p: &Pose2D) -> Pose2D {
        let m = self.matrix();
        let det_sign = if self.flip_x != self.flip_y { -1.0 } else { 1.0 };
        Pose2D::new(
            m[0][0] * p.tx + m[0][1] * p.ty,
            m[1][0] * p.tx + m[1][1] * p.ty,
            det_sign * p.yaw,
        )
    }

    pub fn apply(&self, frame: &PointCloudFrame) -> PointCloudFrame {
        let k = self.scale;
        let points = frame
            .points
            .iter()
            .map(|p| {
                let (x, y) = self.map_xy(p.x, p.y);
                crate::types::Point {
                    x,
                    y,
                    z: k * p.z,
                    intensity: p.intensity,
                }
            })
            .collect();
        let gt_boxes = frame
            .gt_boxes
            .iter()
            .map(|b| {
                let (cx, cy) = self.map_xy(b.cx, b.cy);
                let fx = if self.flip_y { -b.vx } else { b.vx };
                let fy = if self.flip_x { -b.vy } else { b.vy };
                let (s, c) = self.rotation.sin_cos();
                crate::types::Box3D {
                    cx,
                    cy,
                    cz: k * b.cz,
                    w: k * b.w,
                    l: k * b.l,
                    h: k * b.h,
                    yaw: self.map_yaw(b.yaw),
                    vx: k * (c * fx - s * fy),
                    vy: k * (s * fx + c * fy),
                    class_id: b.class_id,
                }
            })
            .collect();
        PointCloudFrame {
            points,
            timestamp: frame.timestamp,
            ego_pose: frame.ego_pose.map(|p| self.map_pose(&p)),
            gt_boxes,
        }
    }
}

/// Samples parameters from `seed` and applies them.
pub fn augment(frame: &PointCloudFrame, cfg: &AugmentConfig, seed: u64) -> PointCloudFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentParams::sample(cfg, &mut rng).apply(frame)
}
