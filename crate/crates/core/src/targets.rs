//! Heatmap and regression targets rendered from ground-truth boxes.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::types::Box3D;
use crate::voxel::BevGeometry;

pub const MIN_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub min_overlap: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { min_overlap: 0.1 }
    }
}

/// Largest corner displacement (in cells) that keeps IoU with an
/// `h x w` box at or above `min_overlap`, over the three corner cases.
pub fn corner_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    // Both corners shifted the same way.
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    // Both corners pulled inward.
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).sqrt()) / 8.0;
    // Both corners pushed outward.
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);
    r1.min(r2).min(r3)
}

/// Gaussian spread (cells) for a box on a map with `cell_size` meter pixels.
pub fn gaussian_radius(b: &Box3D, cell_size: f64, min_overlap: f64) -> f64 {
    let r = corner_radius(b.l / cell_size, b.w / cell_size, min_overlap);
    r.max(MIN_RADIUS) / 3.0
}

/// Regression targets at one object center.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterTarget {
    /// Column `i` and row `j` of the center pixel.
    pub pixel: (usize, usize),
    pub class_id: usize,
    pub object: usize,
    pub offset: [f64; 2],
    pub height: f64,
    pub size: [f64; 3],
    pub rotation: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `[1, K, h, w]`.
    pub heatmap: Tensor,
    pub centers: Vec<CenterTarget>,
}

impl TargetMaps {
    pub fn num_objects(&self) -> usize {
        self.centers.len()
    }
}

/// Renders per-class max-of-Gaussians heatmaps and center regression targets.
/// Boxes whose centers fall outside the map, or whose class is not below
/// `num_classes`, are skipped.
pub fn render_targets(
    boxes: &[Box3D],
    geom: &BevGeometry,
    num_classes: usize,
    cfg: &TargetConfig,
) -> TargetMaps {
    let (w, h) = (geom.width, geom.height);
    let mut heat = vec![0.0; num_classes * h * w];
    let mut centers = Vec::new();
    for (idx, b) in boxes.iter().enumerate() {
        let (px, py) = geom.to_pixel(b.cx, b.cy);
        if b.class_id >= num_classes
            || !(px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64)
        {
            continue;
        }
        let (i, j) = (px.floor() as usize, py.floor() as usize);
        let sigma = gaussian_radius(b, geom.cell, cfg.min_overlap);
        let denom = 2.0 * sigma * sigma;
        let plane = &mut heat[b.class_id * h * w..(b.class_id + 1) * h * w];
        for y in 0..h {
            let dy = y as f64 - j as f64;
            for x in 0..w {
                let dx = x as f64 - i as f64;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let cell = &mut plane[y * w + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
        centers.push(CenterTarget {
            pixel: (i, j),
            class_id: b.class_id,
            object: idx,
            offset: [px - i as f64, py - j as f64],
            height: b.cz,
            size: [b.w.ln(), b.l.ln(), b.h.ln()],
            rotation: [b.yaw.sin(), b.yaw.cos()],
            velocity: [b.vx, b.vy],
        });
    }
    TargetMaps {
        heatmap: Tensor::new([1, num_classes, h, w], heat).expect("heatmap size"),
        centers,
    }
}
