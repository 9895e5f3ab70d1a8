//! A/B comparison of two configurations that differ only in FMF settings.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::Detector;
use crate::nn::Module;
use crate::pipeline::{evaluate_dataset, infer_dataset, LatencyReport};
use crate::train::train;
use crate::types::SceneSequence;

pub const MIN_LATENCY_FRAMES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    pub fmf_enabled: bool,
    pub param_count: usize,
    pub final_loss: f64,
    pub eval: EvalResult,
    pub latency: LatencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub a: ArmReport,
    pub b: ArmReport,
    /// `b.nds - a.nds`.
    pub nds_delta: f64,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for arm in [&self.a, &self.b] {
            s.push_str(&format!(
                "== {} (fmf {}, {} params, final loss {:.4})\n",
                arm.label,
                if arm.fmf_enabled { "on" } else { "off" },
                arm.param_count,
                arm.final_loss
            ));
            s.push_str(&arm.eval.to_table());
            s.push_str(&arm.latency.to_table());
        }
        s.push_str(&format!(
            "NDS {}: {:.4}   NDS {}: {:.4}   delta (b - a): {:+.4}\n",
            self.a.label, self.a.eval.nds, self.b.label, self.b.eval.nds, self.nds_delta
        ));
        s
    }
}

/// Usage error unless `a` and `b` agree on everything except `fmf`.
pub fn check_pair(a: &TrainConfig, b: &TrainConfig) -> Result<()> {
    let mut a_like_b = a.clone();
    a_like_b.fmf = b.fmf.clone();
    if a_like_b != *b {
        return Err(Error::Usage(
            "ablation configs must differ only in their fmf settings".into(),
        ));
    }
    Ok(())
}

/// Times eval-mode inference over at least `min_frames` frames, cycling
/// through the held-out set.
fn time_inference(
    model: &mut Detector,
    scenes: &[SceneSequence],
    min_frames: usize,
) -> Result<LatencyReport> {
    let available: usize = scenes.iter().map(|s| s.frames.len()).sum();
    if available == 0 {
        return Err(Error::Data("held-out set has no frames".into()));
    }
    let mut times = Vec::new();
    while times.len() < min_frames {
        for s in scenes {
            times.extend(model.infer_sequence(&s.frames)?.into_iter().map(|o| o.times));
        }
    }
    LatencyReport::from_times(&times)
}

fn run_arm(
    label: &str,
    cfg: &TrainConfig,
    train_set: &[SceneSequence],
    held_out: &[SceneSequence],
) -> Result<ArmReport> {
    let outcome = train(cfg, train_set, None)?;
    let mut model = outcome.model;
    let outputs = infer_dataset(&mut model, held_out)?;
    let dets = outputs.into_iter().map(|o| o.detections).collect();
    let class_names = &outcome.class_names;
    let eval = evaluate_dataset(dets, held_out, class_names, &cfg.decode)?;
    let latency = time_inference(&mut model, held_out, MIN_LATENCY_FRAMES)?;
    Ok(ArmReport {
        label: label.to_string(),
        fmf_enabled: cfg.fmf.enabled,
        param_count: model.num_trainable(),
        final_loss: outcome.trace.last().map_or(f64::NAN, |r| r.total),
        eval,
        latency,
    })
}

pub fn ablation_run(
    a: &TrainConfig,
    b: &TrainConfig,
    train_set: &[SceneSequence],
    held_out: &[SceneSequence],
) -> Result<AblationReport> {
    check_pair(a, b)?;
    if held_out.is_empty() {
        return Err(Error::Data("ablation needs held-out sequences".into()));
    }
    if held_out.iter().any(|s| s.class_names != train_set[0].class_names) {
        return Err(Error::Data("held-out classes differ from training classes".into()));
    }
    let ra = run_arm("a", a, train_set, held_out)?;
    let rb = run_arm("b", b, train_set, held_out)?;
    let nds_delta = rb.eval.nds - ra.eval.nds;
    Ok(AblationReport {
        a: ra,
        b: rb,
        nds_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_check() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.fmf.enabled = false;
        check_pair(&a, &b).unwrap();
        b.lr_init = 0.01;
        assert!(matches!(check_pair(&a, &b), Err(Error::Usage(_))));
    }
}
