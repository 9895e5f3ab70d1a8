//! Focal heatmap loss, L1 regression at object centers, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::head::HeadOutput;
use crate::targets::TargetMaps;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub offset: f64,
    pub size: f64,
    pub height: f64,
    pub rotation: f64,
    pub velocity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            offset: 1.0,
            size: 1.0,
            height: 1.0,
            rotation: 0.2,
            velocity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.offset, self.size, self.height, self.rotation, self.velocity]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Weighted total of already-evaluated components.
    pub fn combine(&self, c: &LossValues) -> f64 {
        c.heatmap
            + self.offset * c.offset
            + self.size * c.size
            + self.height * c.height
            + self.rotation * c.rotation
            + self.velocity * c.velocity
    }
}

/// Evaluated loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
    pub height: f64,
    pub rotation: f64,
    pub velocity: f64,
    pub total: f64,
}

/// Loss components on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub heatmap: Var,
    pub offset: Var,
    pub size: Var,
    pub height: Var,
    pub rotation: Var,
    pub velocity: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item();
        LossValues {
            heatmap: v(self.heatmap),
            offset: v(self.offset),
            size: v(self.size),
            height: v(self.height),
            rotation: v(self.rotation),
            velocity: v(self.velocity),
            total: v(self.total),
        }
    }
}

/// Focal loss summed over a batch and divided by the batch's object count
/// (or by 1 when there are no objects).
pub fn focal_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[&TargetMaps],
    fp: &FocalParams,
) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Usage("focal_loss needs matching nonempty batches".into()));
    }
    let n: usize = targets.iter().map(|t| t.num_objects()).sum();
    let norm = n.max(1) as f64;
    let mut acc: Option<Var> = None;
    for (&p, t) in preds.iter().zip(targets) {
        let l = tape.focal_loss(p, &t.heatmap, fp.alpha, fp.beta, norm)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Mean absolute error between predicted channels gathered at each center
/// pixel and their targets, over all centers and components of the batch.
fn center_l1(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[&TargetMaps],
    extract: impl Fn(&crate::targets::CenterTarget) -> Vec<f64>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (&p, t) in preds.iter().zip(targets) {
        if t.centers.is_empty() {
            continue;
        }
        let pixels: Vec<_> = t.centers.iter().map(|c| (0, c.pixel.1, c.pixel.0)).collect();
        let gathered = tape.gather_pixels(p, &pixels)?;
        let width = tape.shape(gathered)[1];
        let data: Vec<f64> = t.centers.iter().flat_map(&extract).collect();
        if data.len() != pixels.len() * width {
            return Err(Error::shape("regression target width does not match head branch"));
        }
        let target = tape.constant(Tensor::new([pixels.len(), width], data)?);
        let d = tape.sub(gathered, target)?;
        let d = tape.abs(d);
        let s = tape.sum(d);
        count += pixels.len() * width;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(match acc {
        Some(a) => tape.scale(a, 1.0 / count as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// `(L_offset, L_size, L_height, L_rotation, L_velocity)` over a batch.
pub fn regression_losses(
    tape: &mut Tape,
    heads: &[HeadOutput],
    targets: &[&TargetMaps],
) -> Result<[Var; 5]> {
    if heads.len() != targets.len() {
        return Err(Error::Usage("regression_losses needs matching batches".into()));
    }
    let pick = |f: fn(&HeadOutput) -> Var| heads.iter().map(f).collect::<Vec<_>>();
    Ok([
        center_l1(tape, &pick(|h| h.offset), targets, |c| c.offset.to_vec())?,
        center_l1(tape, &pick(|h| h.size), targets, |c| c.size.to_vec())?,
        center_l1(tape, &pick(|h| h.height), targets, |c| vec![c.height])?,
        center_l1(tape, &pick(|h| h.rotation), targets, |c| c.rotation.to_vec())?,
        center_l1(tape, &pick(|h| h.velocity), targets, |c| c.velocity.to_vec())?,
    ])
}

/// `L_hm + sum(gamma_i * L_i)` on the tape.
pub fn total_loss(
    tape: &mut Tape,
    heatmap: Var,
    regression: [Var; 5],
    w: &LossWeights,
) -> Result<Var> {
    let weights = [w.offset, w.size, w.height, w.rotation, w.velocity];
    let mut total = heatmap;
    for (l, g) in regression.into_iter().zip(weights) {
        let term = tape.scale(l, g);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// All loss components for a batch of head outputs.
pub fn compute_losses(
    tape: &mut Tape,
    heads: &[HeadOutput],
    targets: &[&TargetMaps],
    fp: &FocalParams,
    w: &LossWeights,
) -> Result<LossTerms> {
    let hm: Vec<Var> = heads.iter().map(|h| h.heatmap).collect();
    let heatmap = focal_loss(tape, &hm, targets, fp)?;
    let reg = regression_losses(tape, heads, targets)?;
    let total = total_loss(tape, heatmap, reg, w)?;
    Ok(LossTerms {
        heatmap,
        offset: reg[0],
        size: reg[1],
        height: reg[2],
        rotation: reg[3],
        velocity: reg[4],
        total,
    })
}
