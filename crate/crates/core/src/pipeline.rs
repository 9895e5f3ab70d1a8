//! Dataset-level inference, detection records, evaluation and latency
//! statistics.

use serde::{Deserialize, Serialize};

use crate::decode::{Detection, MatchConfig};
use crate::error::{Error, Result};
use crate::io::DetectionRecord;
use crate::metrics::{evaluate, EvalResult};
use crate::model::{Detector, FrameOutput, StageTimes};
use crate::types::{Box3D, SceneSequence};

/// Runs every sequence from a cold state; outputs are in dataset order
/// (sequence by sequence, frames in order).
pub fn infer_dataset(model: &mut Detector, scenes: &[SceneSequence]) -> Result<Vec<FrameOutput>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(model.infer_sequence(&s.frames)?);
    }
    Ok(out)
}

/// Ground truth per frame in dataset order.
pub fn dataset_ground_truth(scenes: &[SceneSequence]) -> Vec<Vec<Box3D>> {
    scenes
        .iter()
        .flat_map(|s| s.frames.iter().map(|f| f.gt_boxes.clone()))
        .collect()
}

/// `frame` in each record is the dataset-order frame index.
pub fn to_records(
    detections: &[Vec<Detection>],
    class_names: &[String],
) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (frame, dets) in detections.iter().enumerate() {
        for d in dets {
            let b = &d.bbox;
            let class = class_names
                .get(b.class_id)
                .ok_or_else(|| Error::Usage(format!("class id {} has no name", b.class_id)))?;
            out.push(DetectionRecord {
                frame,
                class: class.clone(),
                score: d.score,
                center: [b.cx, b.cy, b.cz],
                size: [b.w, b.l, b.h],
                yaw: b.yaw,
                velocity: [b.vx, b.vy],
            });
        }
    }
    Ok(out)
}

pub fn from_records(
    records: &[DetectionRecord],
    class_names: &[String],
    num_frames: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); num_frames];
    for r in records {
        let class_id = class_names
            .iter()
            .position(|c| *c == r.class)
            .ok_or_else(|| Error::Data(format!("unknown class {:?} in detections", r.class)))?;
        let slot = out.get_mut(r.frame).ok_or_else(|| {
            Error::Data(format!(
                "detection for frame {} but the dataset has {num_frames} frames",
                r.frame
            ))
        })?;
        slot.push(Detection {
            bbox: Box3D {
                cx: r.center[0],
                cy: r.center[1],
                cz: r.center[2],
                w: r.size[0],
                l: r.size[1],
                h: r.size[2],
                yaw: r.yaw,
                vx: r.velocity[0],
                vy: r.velocity[1],
                class_id,
            },
            score: r.score,
        });
    }
    Ok(out)
}

pub fn evaluate_dataset(
    detections: Vec<Vec<Detection>>,
    scenes: &[SceneSequence],
    class_names: &[String],
    cfg: &MatchConfig,
) -> Result<EvalResult> {
    let gts = dataset_ground_truth(scenes);
    if gts.len() != detections.len() {
        return Err(Error::Data(format!(
            "{} detection frames for {} ground-truth frames",
            detections.len(),
            gts.len()
        )));
    }
    let frames: Vec<_> = detections.into_iter().zip(gts).collect();
    evaluate(&frames, class_names, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles. Empty input is a usage error.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("latency statistics need at least one frame".into()));
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Ok(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: rank(0.5),
            p99: rank(0.99),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: usize,
    /// `(stage, stats)` in pipeline order, seconds.
    pub stages: Vec<(String, LatencyStats)>,
    pub total: LatencyStats,
}

impl LatencyReport {
    pub fn from_times(times: &[StageTimes]) -> Result<Self> {
        let stages = StageTimes::STAGES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let s: Vec<f64> = times.iter().map(|t| t.stages()[i]).collect();
                Ok((name.to_string(), LatencyStats::from_samples(&s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let total: Vec<f64> = times.iter().map(|t| t.total).collect();
        Ok(Self {
            frames: times.len(),
            stages,
            total: LatencyStats::from_samples(&total)?,
        })
    }

    pub fn stage_mean_sum(&self) -> f64 {
        self.stages.iter().map(|(_, s)| s.mean).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>10} {:>10} {:>10}   ({} frames, ms)\n",
            "stage", "mean", "p50", "p99", self.frames
        );
        let rows = self
            .stages
            .iter()
            .map(|(n, st)| (n.as_str(), st))
            .chain(std::iter::once(("total", &self.total)));
        for (name, st) in rows {
            s.push_str(&format!(
                "{:<10} {:>10.3} {:>10.3} {:>10.3}\n",
                name,
                st.mean * 1e3,
                st.p50 * 1e3,
                st.p99 * 1e3
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = LatencyStats::from_samples(&v).unwrap();
        assert_eq!((s.p50, s.p99), (50.0, 99.0));
        assert_eq!(s.mean, 50.5);
        assert!(LatencyStats::from_samples(&[]).is_err());
    }
}
