//! Center-distance matching, average precision, true-positive errors and the
//! detection score composite.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::{Detection, MatchConfig};
use crate::error::{Error, Result};
use crate::types::{angle_diff, Box3D};

pub const RECALL_STEPS: usize = 101;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;

/// Box with the frame it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBox {
    pub frame: usize,
    pub bbox: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub frame: usize,
    pub bbox: Box3D,
    pub score: f64,
}

/// Mean true-positive errors over matched pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub ap: f64,
    pub errors: TpErrors,
    pub matches: usize,
}

pub fn bev_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// `1 - IoU` of two boxes aligned at a common center and heading.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.w.min(b.w) * a.l.min(b.l) * a.h.min(b.h);
    let union = a.w * a.l * a.h + b.w * b.l * b.h - inter;
    1.0 - inter / union
}

/// Detection order: score descending, then class, then center coordinates.
pub fn detection_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.class_id.cmp(&b.bbox.class_id))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.cz.total_cmp(&b.bbox.cz))
        .then(a.frame.cmp(&b.frame))
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x` with the endpoint
/// value held on the left and `right` beyond the last knot. `xs` ascends.
pub fn interp(x: f64, xs: &[f64], ys: &[f64], right: f64) -> f64 {
    if xs.is_empty() {
        return right;
    }
    if x < xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x > xs[last] {
        return right;
    }
    if x == xs[last] {
        return ys[last];
    }
    // First knot strictly greater than x.
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    let (x0, x1) = (xs[lo], xs[hi]);
    if x1 == x0 {
        return ys[lo];
    }
    ys[lo] + (x - x0) * (ys[hi] - ys[lo]) / (x1 - x0)
}

/// Greedy matching of one class's detections to ground truth within
/// `threshold` meters (BEV center distance), with AP over the interpolated
/// precision-recall curve. Returns `None` when there is no ground truth.
pub fn match_and_ap(dets: &[ScoredBox], gts: &[FrameBox], threshold: f64) -> Option<MatchResult> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<ScoredBox> = dets.to_vec();
    order.sort_by(detection_order);
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    let (mut ate, mut ase, mut aoe, mut ave) = (0.0, 0.0, 0.0, 0.0);
    let mut matches = 0usize;
    for d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.frame != d.frame || g.bbox.class_id != d.bbox.class_id {
                continue;
            }
            let dist = bev_distance(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        match best {
            Some((gi, dist)) if dist < threshold => {
                taken[gi] = true;
                tp.push(true);
                let g = &gts[gi].bbox;
                matches += 1;
                ate += dist;
                ase += scale_error(&d.bbox, g);
                aoe += angle_diff(d.bbox.yaw, g.yaw);
                ave += (d.bbox.vx - g.vx).hypot(d.bbox.vy - g.vy);
            }
            _ => tp.push(false),
        }
    }
    let errors = if matches == 0 {
        TpErrors::WORST
    } else {
        let m = matches as f64;
        TpErrors {
            ate: ate / m,
            ase: ase / m,
            aoe: aoe / m,
            ave: ave / m,
            aae: 0.0,
        }
    };
    let npos = gts.len() as f64;
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for &t in &tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        recall.push(ctp / npos);
        precision.push(ctp / (ctp + cfp));
    }
    Some(MatchResult {
        ap: average_precision(&recall, &precision),
        errors,
        matches,
    })
}

/// Area under the precision-recall curve sampled at 101 recall points,
/// restricted to recall above `MIN_RECALL`, with precision floored at
/// `MIN_PRECISION` and rescaled to `[0, 1]`.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    if recall.is_empty() {
        return 0.0;
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let kept: Vec<f64> = (first..RECALL_STEPS)
        .map(|s| {
            let r = s as f64 / (RECALL_STEPS - 1) as f64;
            (interp(r, recall, precision, 0.0) - MIN_PRECISION).max(0.0)
        })
        .collect();
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    (mean / (1.0 - MIN_PRECISION)).clamp(0.0, 1.0)
}

/// Composite detection score from mAP and the five mean TP errors.
pub fn nds(map: f64, mate: f64, mase: f64, maoe: f64, mave: f64, maae: f64) -> f64 {
    let tp: f64 = [mate, mase, maoe, mave, maae]
        .iter()
        .map(|e| 1.0 - e.min(1.0))
        .sum();
    (5.0 * map + tp) / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub num_gt: usize,
    /// AP per distance threshold, in config order.
    pub ap_by_threshold: Vec<f64>,
    pub ap: f64,
    pub errors: TpErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    /// No attribute labels exist: 0 for classes with matches, 1 otherwise.
    pub maae: f64,
    pub nds: f64,
    pub distance_thresholds: Vec<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalResult {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mAP {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  mAVE {:.4}  mAAE {:.4}  NDS {:.4}",
            self.map, self.mate, self.mase, self.maoe, self.mave, self.maae, self.nds
        );
        let _ = write!(s, "{:<14} {:>6}", "class", "gt");
        for t in &self.distance_thresholds {
            let _ = write!(s, " {:>8}", format!("AP@{t}"));
        }
        let _ = writeln!(s, " {:>8} {:>7} {:>7} {:>7} {:>7}", "AP", "ATE", "ASE", "AOE", "AVE");
        for c in &self.per_class {
            let _ = write!(s, "{:<14} {:>6}", c.name, c.num_gt);
            for ap in &c.ap_by_threshold {
                let _ = write!(s, " {ap:>8.4}");
            }
            let _ = writeln!(
                s,
                " {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                c.ap, c.errors.ate, c.errors.ase, c.errors.aoe, c.errors.ave
            );
        }
        s
    }
}

/// Scores per-frame detections against per-frame ground truth. Classes
/// without ground truth are left out of every mean.
pub fn evaluate(
    frames: &[(Vec<Detection>, Vec<Box3D>)],
    class_names: &[String],
    cfg: &MatchConfig,
) -> Result<EvalResult> {
    let k = class_names.len();
    if k == 0 {
        return Err(Error::Usage("evaluation needs at least one class".into()));
    }
    if cfg.distance_thresholds.is_empty() {
        return Err(Error::Config("no distance thresholds".into()));
    }
    let mut dets: Vec<Vec<ScoredBox>> = vec![Vec::new(); k];
    let mut gts: Vec<Vec<FrameBox>> = vec![Vec::new(); k];
    for (frame, (ds, gs)) in frames.iter().enumerate() {
        for d in ds {
            let c = d.bbox.class_id;
            if c >= k {
                return Err(Error::Usage(format!(
                    "detection class {c} outside the {k} known classes"
                )));
            }
            dets[c].push(ScoredBox {
                frame,
                bbox: d.bbox,
                score: d.score,
            });
        }
        for g in gs {
            let c = g.class_id;
            if c >= k {
                return Err(Error::Usage(format!(
                    "ground-truth class {c} outside the {k} known classes"
                )));
            }
            gts[c].push(FrameBox { frame, bbox: *g });
        }
    }
    let mut per_class = Vec::new();
    for c in 0..k {
        if gts[c].is_empty() {
            continue;
        }
        let ap_by_threshold: Vec<f64> = cfg
            .distance_thresholds
            .iter()
            .map(|&t| match_and_ap(&dets[c], &gts[c], t).map_or(0.0, |r| r.ap))
            .collect();
        let tp = match_and_ap(&dets[c], &gts[c], cfg.tp_threshold).expect("gt present");
        per_class.push(ClassMetrics {
            name: class_names[c].clone(),
            num_gt: gts[c].len(),
            ap: ap_by_threshold.iter().sum::<f64>() / ap_by_threshold.len() as f64,
            ap_by_threshold,
            errors: tp.errors,
        });
    }
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64, empty: f64| {
        if per_class.is_empty() {
            empty
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    let map = mean(&|c| c.ap, 0.0);
    let mate = mean(&|c| c.errors.ate, 1.0);
    let mase = mean(&|c| c.errors.ase, 1.0);
    let maoe = mean(&|c| c.errors.aoe, 1.0);
    let mave = mean(&|c| c.errors.ave, 1.0);
    let maae = mean(&|c| c.errors.aae, 1.0);
    Ok(EvalResult {
        map,
        mate,
        mase,
        maoe,
        mave,
        maae,
        nds: nds(map, mate, mase, maoe, mave, maae),
        distance_thresholds: cfg.distance_thresholds.clone(),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, class_id: usize) -> Box3D {
        Box3D {
            cx,
            cy,
            cz: 0.0,
            w: 2.0,
            l: 4.0,
            h: 1.5,
            yaw: 0.1,
            vx: 0.0,
            vy: 1.0,
            class_id,
        }
    }

    #[test]
    fn table_two_rows() {
        let a = nds(0.5719, 0.2964, 0.2552, 0.3258, 0.2793, 0.1860);
        assert!((a - 0.6517).abs() <= 0.00005);
        let c = nds(0.5024, 0.3130, 0.2593, 0.3936, 0.3260, 0.1976);
        assert!((c - 0.6023).abs() <= 0.00005);
        assert_eq!(nds(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![b(0.0, 0.0, 0), b(5.0, 5.0, 1)];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                bbox: *g,
                score: 0.9,
            })
            .collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let cfg = MatchConfig::default();
        let r = evaluate(&[(perfect, gts.clone())], &names, &cfg).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.nds, 1.0);
        let e = evaluate(&[(vec![], gts)], &names, &cfg).unwrap();
        assert_eq!(e.map, 0.0);
        assert_eq!(e.nds, 0.0);
    }

    #[test]
    fn unknown_class_is_usage_error() {
        let d = Detection {
            bbox: b(0.0, 0.0, 3),
            score: 0.5,
        };
        let r = evaluate(&[(vec![d], vec![])], &["a".into()], &MatchConfig::default());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn interp_matches_numpy_conventions() {
        let xs = [0.2, 0.5, 0.5, 1.0];
        let ys = [1.0, 0.8, 0.6, 0.4];
        assert_eq!(interp(0.0, &xs, &ys, 0.0), 1.0);
        assert!((interp(0.35, &xs, &ys, 0.0) - 0.9).abs() < 1e-12);
        assert_eq!(interp(1.0, &xs, &ys, 0.0), 0.4);
        assert_eq!(interp(1.5, &xs, &ys, 0.0), 0.0);
    }
}
