//! Peak extraction and box decoding from head maps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::HeadMaps;
use crate::tensor::{maxpool2d, Tensor};
use crate::types::{wrap_angle, Box3D};
use crate::voxel::BevGeometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub distance_thresholds: Vec<f64>,
    /// Threshold at which true-positive errors are measured.
    pub tp_threshold: f64,
    pub score_threshold: f64,
    pub top_k: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            distance_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            score_threshold: 0.1,
            top_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// A heatmap peak: class `k`, row `j`, column `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Pixels equal to their 3x3 neighborhood maximum. Among equal neighbors only
/// the first in (row, column) order survives.
pub fn find_peaks(heatmap: &Tensor) -> Result<Vec<Peak>> {
    let (n, k, h, w) = heatmap.dims4()?;
    let pooled = maxpool2d(heatmap, 3, 1, 1)?;
    let mut peaks = Vec::new();
    for b in 0..n {
        for c in 0..k {
            for j in 0..h {
                for i in 0..w {
                    let v = heatmap.at4(b, c, j, i);
                    if v != pooled.at4(b, c, j, i) {
                        continue;
                    }
                    let earlier_tie = (j.saturating_sub(1)..=j).any(|y| {
                        (i.saturating_sub(1)..(i + 2).min(w)).any(|x| {
                            (y, x) < (j, i) && heatmap.at4(b, c, y, x) == v
                        })
                    });
                    if !earlier_tie {
                        peaks.push(Peak {
                            class_id: c,
                            row: j,
                            col: i,
                            score: v,
                        });
                    }
                }
            }
        }
    }
    Ok(peaks)
}

/// Orders by score descending, then class, row and column.
fn peak_order(a: &Peak, b: &Peak) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

pub fn decode(maps: &HeadMaps, geom: &BevGeometry, cfg: &MatchConfig) -> Result<Vec<Detection>> {
    let mut peaks = find_peaks(&maps.heatmap)?;
    peaks.sort_by(peak_order);
    peaks.truncate(cfg.top_k);
    Ok(peaks
        .into_iter()
        .filter(|p| p.score >= cfg.score_threshold)
        .map(|p| {
            let (j, i) = (p.row, p.col);
            let at = |t: &Tensor, c: usize| t.at4(0, c, j, i);
            let cx = (i as f64 + at(&maps.offset, 0)) * geom.cell + geom.x_min;
            let cy = (j as f64 + at(&maps.offset, 1)) * geom.cell + geom.y_min;
            Detection {
                bbox: Box3D {
                    cx,
                    cy,
                    cz: at(&maps.height, 0),
                    w: at(&maps.size, 0).exp(),
                    l: at(&maps.size, 1).exp(),
                    h: at(&maps.size, 2).exp(),
                    yaw: wrap_angle(at(&maps.rotation, 0).atan2(at(&maps.rotation, 1))),
                    vx: at(&maps.velocity, 0),
                    vy: at(&maps.velocity, 1),
                    class_id: p.class_id,
                },
                score: p.score,
            }
        })
        .collect())
}
