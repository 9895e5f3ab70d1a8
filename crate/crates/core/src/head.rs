//! Center-based multi-task head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param};
use crate::tensor::Tensor;

/// Prior probability the heatmap starts at.
pub const HEATMAP_PRIOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub head_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { head_channels: 32 }
    }
}

/// Output widths in branch order: heatmap, offset, height, size, rotation, velocity.
pub fn branch_widths(num_classes: usize) -> [usize; 6] {
    [num_classes, 2, 1, 3, 2, 2]
}

pub const BRANCH_NAMES: [&str; 6] = ["heatmap", "offset", "height", "size", "rotation", "velocity"];

impl HeadConfig {
    pub fn param_count(&self, in_channels: usize, num_classes: usize) -> usize {
        let ch = self.head_channels;
        branch_widths(num_classes)
            .iter()
            .map(|&o| in_channels * ch * 9 + ch + ch * o + o)
            .sum()
    }
}

#[derive(Debug, Clone)]
struct Branch {
    hidden: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    branches: Vec<Branch>,
    num_classes: usize,
}

/// Head predictions on the tape. The heatmap is post-sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub heatmap: Var,
    pub offset: Var,
    pub height: Var,
    pub size: Var,
    pub rotation: Var,
    pub velocity: Var,
}

/// Detached head predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub heatmap: Tensor,
    pub offset: Tensor,
    pub height: Tensor,
    pub size: Tensor,
    pub rotation: Tensor,
    pub velocity: Tensor,
}

impl HeadOutput {
    pub fn maps(&self, tape: &Tape) -> HeadMaps {
        HeadMaps {
            heatmap: tape.value(self.heatmap).clone(),
            offset: tape.value(self.offset).clone(),
            height: tape.value(self.height).clone(),
            size: tape.value(self.size).clone(),
            rotation: tape.value(self.rotation).clone(),
            velocity: tape.value(self.velocity).clone(),
        }
    }
}

impl HeadMaps {
    pub fn all_finite(&self) -> bool {
        [
            &self.heatmap,
            &self.offset,
            &self.height,
            &self.size,
            &self.rotation,
            &self.velocity,
        ]
        .iter()
        .all(|t| t.all_finite())
    }
}

impl Head {
    pub fn new(
        cfg: &HeadConfig,
        in_channels: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.head_channels == 0 || num_classes == 0 {
            return Err(Error::Config("head needs at least one channel and class".into()));
        }
        let branches = branch_widths(num_classes)
            .iter()
            .zip(BRANCH_NAMES)
            .map(|(&o, name)| {
                let hidden = Conv2d::new(
                    &format!("head.{name}.hidden"),
                    in_channels,
                    cfg.head_channels,
                    3,
                    1,
                    true,
                    rng,
                );
                let mut out = Conv2d::new(
                    &format!("head.{name}.out"),
                    cfg.head_channels,
                    o,
                    1,
                    1,
                    true,
                    rng,
                );
                if name == "heatmap" {
                    out.weight.value.data_mut().iter_mut().for_each(|w| *w *= 0.01);
                    let b = -((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR).ln();
                    if let Some(bias) = &mut out.bias {
                        bias.value.data_mut().iter_mut().for_each(|v| *v = b);
                    }
                }
                Branch { hidden, out }
            })
            .collect();
        Ok(Self {
            branches,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, tape: &mut Tape, bev: Var) -> Result<HeadOutput> {
        let c = self.branches[0].hidden.weight.value.shape()[1];
        let shape = tape.value(bev).dims4()?;
        if shape.1 != c {
            return Err(Error::shape(format!(
                "head expects {c} channels, got {}",
                shape.1
            )));
        }
        let mut outs = Vec::with_capacity(6);
        for b in &self.branches {
            outs.push(b.forward(tape, bev)?);
        }
        let heatmap = tape.sigmoid(outs[0]);
        Ok(HeadOutput {
            heatmap,
            offset: outs[1],
            height: outs[2],
            size: outs[3],
            rotation: outs[4],
            velocity: outs[5],
        })
    }
}

impl Module for Head {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.branches {
            b.hidden.visit(f);
            b.out.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.branches {
            b.hidden.visit_mut(f);
            b.out.visit_mut(f);
        }
    }
}
