//! Sequential training over frame pairs with AdamW and the one-cycle policy.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::compute_losses;
use crate::model::Detector;
use crate::optim::{collect_grads, AdamW};
use crate::targets::render_targets;
use crate::types::SceneSequence;

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
    pub height: f64,
    pub rotation: f64,
    pub velocity: f64,
    pub total: f64,
}

pub const TRACE_HEADER: &str = "step,lr,L_hm,L_l,L_s,L_H,L_r,L_v,L_total";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.lr, r.heatmap, r.offset, r.size, r.height, r.rotation, r.velocity, r.total
        );
    }
    s
}

pub fn write_trace(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trace_csv(rows)).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: Detector,
    pub optimizer: AdamW,
    pub trace: Vec<TraceRow>,
    pub class_names: Vec<String>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::capture(&self.model, cfg, &self.class_names, Some(&self.optimizer))
    }
}

/// `(sequence, frame)` for every training sample; the pair is
/// `(frame - 1, frame)`, and a sequence's first frame pairs with itself as a
/// cold start.
pub fn training_pairs(scenes: &[SceneSequence]) -> Vec<(usize, usize)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.frames.len()).map(move |t| (s, t)))
        .collect()
}

pub fn total_steps(cfg: &TrainConfig, num_pairs: usize) -> usize {
    let per_epoch = num_pairs.div_ceil(cfg.batch_size);
    cfg.max_steps.unwrap_or(cfg.epochs * per_epoch)
}

fn check_scenes(scenes: &[SceneSequence]) -> Result<Vec<String>> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Data("training needs at least one scene".into()))?;
    for s in scenes {
        s.validate()?;
        if s.class_names != first.class_names {
            return Err(Error::Data("scenes disagree on class names".into()));
        }
    }
    if scenes.iter().all(|s| s.frames.is_empty()) {
        return Err(Error::Data("training scenes contain no frames".into()));
    }
    Ok(first.class_names.clone())
}

/// Trains from scratch. `progress` sees every trace row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[SceneSequence],
    mut progress: Option<&mut dyn FnMut(&TraceRow)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let class_names = check_scenes(scenes)?;
    let k = class_names.len();
    let mut model = Detector::new(&cfg.model_config(), k, cfg.seed)?;
    let mut optimizer = AdamW::new(cfg.optimizer(), &model);
    let schedule = cfg.schedule();
    let pairs = training_pairs(scenes);
    let total = total_steps(cfg, pairs.len());
    if total == 0 {
        return Err(Error::Config("training would run zero steps".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                if !batch.is_empty() {
                    break;
                }
                order = pairs.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let (lr, beta1) = schedule.at(step, total, cfg.lr_init)?;
        let mut tape = Tape::new();
        let mut heads = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &(s, t) in &batch {
            let frames = &scenes[s].frames;
            let aug = if cfg.augment_enabled {
                AugmentParams::sample(&cfg.augment, &mut rng)
            } else {
                AugmentParams::IDENTITY
            };
            let voxel_seed: u64 = rng.gen();
            let cur = aug.apply(&frames[t]);
            let prev = aug.apply(&frames[t.saturating_sub(1)]);
            heads.push(model.forward_pair(&mut tape, &prev, &cur, voxel_seed, true)?);
            targets.push(render_targets(&cur.gt_boxes, &model.geom, k, &cfg.targets));
        }
        let target_refs: Vec<_> = targets.iter().collect();
        let terms = compute_losses(&mut tape, &heads, &target_refs, &cfg.focal, &cfg.loss_weights)?;
        let v = terms.values(&tape);
        if !v.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss is {} (components {v:?})", v.total),
            });
        }
        tape.backward(terms.total)?;
        let grads = collect_grads(&model, &tape);
        let norm = AdamW::grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        optimizer.update(&mut model, &grads, lr, beta1)?;
        let row = TraceRow {
            step,
            lr,
            heatmap: v.heatmap,
            offset: v.offset,
            size: v.size,
            height: v.height,
            rotation: v.rotation,
            velocity: v.velocity,
            total: v.total,
        };
        if let Some(p) = progress.as_mut() {
            p(&row);
        }
        trace.push(row);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        trace,
        class_names,
    })
}
