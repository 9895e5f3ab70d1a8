//! Per-stage latency of eval-mode inference, sequential and across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::model::{Detector, FrameOutput};
use crate::pipeline::LatencyReport;
use crate::types::SceneSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub single: LatencyReport,
    /// Sequences run concurrently, one model copy per sequence.
    pub parallel: LatencyReport,
    pub threads: usize,
    pub parallel_wall_seconds: f64,
}

/// Truncates the dataset to its first `frames` frames (all when `None`).
fn take_frames(scenes: &[SceneSequence], frames: Option<usize>) -> Vec<SceneSequence> {
    let mut left = frames.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for s in scenes {
        if left == 0 {
            break;
        }
        let n = s.frames.len().min(left);
        left -= n;
        out.push(SceneSequence {
            frames: s.frames[..n].to_vec(),
            class_names: s.class_names.clone(),
        });
    }
    out
}

/// Benchmarks the first `frames` frames. Also returns the sequential
/// detections in dataset order.
pub fn bench(
    model: &Detector,
    scenes: &[SceneSequence],
    frames: Option<usize>,
) -> Result<(BenchReport, Vec<Vec<Detection>>)> {
    let scenes = take_frames(scenes, frames);
    let n: usize = scenes.iter().map(|s| s.frames.len()).sum();
    if n == 0 {
        return Err(Error::Usage("bench needs at least one frame".into()));
    }
    let mut m = model.clone();
    let mut single = Vec::with_capacity(n);
    for s in &scenes {
        single.extend(m.infer_sequence(&s.frames)?);
    }
    let start = std::time::Instant::now();
    let parallel: Vec<Vec<FrameOutput>> = scenes
        .par_iter()
        .map(|s| model.clone().infer_sequence(&s.frames))
        .collect::<Result<_>>()?;
    let parallel_wall_seconds = start.elapsed().as_secs_f64();
    let report = BenchReport {
        single: LatencyReport::from_times(&single.iter().map(|o| o.times).collect::<Vec<_>>())?,
        parallel: LatencyReport::from_times(
            &parallel.iter().flatten().map(|o| o.times).collect::<Vec<_>>(),
        )?,
        threads: rayon::current_num_threads(),
        parallel_wall_seconds,
    };
    Ok((report, single.into_iter().map(|o| o.detections).collect()))
}
