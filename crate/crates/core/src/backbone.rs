//! Pillar feature network and the multi-scale BEV neck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvBnRelu, Linear, Module, Param};
use crate::tensor::Tensor;
use crate::voxel::{GridMode, PillarTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub pfn_channels: usize,
    pub neck_channels: Vec<usize>,
    /// Downsampling of each stage relative to the previous one.
    pub neck_strides: Vec<usize>,
    pub out_channels: usize,
    pub output_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            pfn_channels: 32,
            neck_channels: vec![32, 64],
            neck_strides: vec![1, 2],
            out_channels: 64,
            output_stride: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backbone: {m}")));
        if self.pfn_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be at least 1");
        }
        if self.neck_channels.is_empty() || self.neck_channels.len() != self.neck_strides.len() {
            return bad("neck_channels and neck_strides must be nonempty and equally long");
        }
        if self.neck_channels.contains(&0) {
            return bad("neck channel counts must be at least 1");
        }
        if self
            .neck_strides
            .iter()
            .chain([&self.output_stride])
            .any(|s| !s.is_power_of_two())
        {
            return bad("strides must be powers of two");
        }
        Ok(())
    }

    /// Cumulative stride after each stage.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.neck_strides
            .iter()
            .scan(1, |acc, s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    /// Dims must divide by this for every stage to stay exact.
    pub fn required_divisor(&self) -> usize {
        self.cumulative_strides()
            .into_iter()
            .chain([self.output_stride])
            .max()
            .unwrap_or(1)
    }

    /// Closed-form trainable parameter count for input feature width `d`.
    pub fn param_count(&self, d: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + 2 * o;
        let mut n = d * self.pfn_channels + 2 * self.pfn_channels;
        let mut input = self.pfn_channels;
        for &c in &self.neck_channels {
            n += conv(input, c, 3) + conv(c, c, 3);
            input = c;
        }
        n + conv(self.neck_channels.iter().sum(), self.out_channels, 1)
    }
}

/// Per-point linear embedding with masked batch norm, max-pooled per pillar.
#[derive(Debug, Clone)]
pub struct PillarFeatureNet {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub mode: GridMode,
}

impl PillarFeatureNet {
    pub fn new(feature_dim: usize, channels: usize, mode: GridMode, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new("pfn.linear", feature_dim, channels, false, rng),
            bn: BatchNorm::new("pfn.bn", channels),
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.bn.channels()
    }

    /// Returns the pseudo-image `[1, C, H, W]`.
    pub fn forward(&mut self, tape: &mut Tape, pillars: &PillarTensor, train: bool) -> Result<Var> {
        let d = self.linear.weight.value.shape()[1];
        let c = self.channels();
        let (w, h) = (pillars.grid_dims.width, pillars.grid_dims.height);
        if pillars.feature_dim != d {
            return Err(Error::shape(format!(
                "pillar feature width {} does not match network input {d}",
                pillars.feature_dim
            )));
        }
        let p = pillars.num_cells();
        if p == 0 {
            return Ok(tape.constant(Tensor::zeros([1, c, h, w])));
        }
        let n = pillars.max_points;
        let x = tape.constant(Tensor::new([p * n, d], pillars.features.clone())?);
        let mask: Vec<bool> = (0..p * n).map(|r| r % n < pillars.point_counts[r / n]).collect();
        let y = self.linear.forward(tape, x)?;
        let y = self.bn.forward(tape, y, train, Some(&mask))?;
        let y = tape.relu(y);
        let y = tape.reshape(y, &[p, n, c])?;
        let y = tape.max_over_axis(y, &pillars.point_counts)?;
        let coords: Vec<(usize, usize)> = pillars.coords.iter().map(|c| (c.x, c.y)).collect();
        match self.mode {
            GridMode::Pillar => tape.scatter_to_grid(y, &coords, (w, h)),
            GridMode::Voxel => {
                let depth = pillars.grid_dims.depth.max(1);
                tape.scatter_add_to_grid(y, &coords, (w, h), 1.0 / depth as f64)
            }
        }
    }
}

impl Module for PillarFeatureNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.linear.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.linear.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
enum Resample {
    /// Strided 3x3 conv down to the output stride (factor 1 keeps resolution).
    Down(ConvBnRelu),
    /// Nearest upsampling by the factor, then a 3x3 conv.
    Up(usize, ConvBnRelu),
}

#[derive(Debug, Clone)]
pub struct Neck {
    stages: Vec<ConvBnRelu>,
    branches: Vec<Resample>,
    fuse: ConvBnRelu,
    divisor: usize,
    output_stride: usize,
}

impl Neck {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut branches = Vec::new();
        let mut input = cfg.pfn_channels;
        let s_out = cfg.output_stride;
        for (i, (&c, cum)) in cfg
            .neck_channels
            .iter()
            .zip(cfg.cumulative_strides())
            .enumerate()
        {
            stages.push(ConvBnRelu::new(
                &format!("neck.stage{i}"),
                input,
                c,
                3,
                cfg.neck_strides[i],
                rng,
            ));
            let name = format!("neck.branch{i}");
            branches.push(if cum <= s_out {
                Resample::Down(ConvBnRelu::new(&name, c, c, 3, s_out / cum, rng))
            } else {
                Resample::Up(cum / s_out, ConvBnRelu::new(&name, c, c, 3, 1, rng))
            });
            input = c;
        }
        let fuse = ConvBnRelu::new(
            "neck.fuse",
            cfg.neck_channels.iter().sum(),
            cfg.out_channels,
            1,
            1,
            rng,
        );
        Ok(Self {
            stages,
            branches,
            fuse,
            divisor: cfg.required_divisor(),
            output_stride: s_out,
        })
    }

    pub fn output_stride(&self) -> usize {
        self.output_stride
    }

    /// `[1, C_pfn, H, W]` to `[1, C, H/s, W/s]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        if h % self.divisor != 0 || w % self.divisor != 0 {
            return Err(Error::shape(format!(
                "neck input {h}x{w} is not divisible by {}",
                self.divisor
            )));
        }
        let mut cur = x;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (stage, branch) in self.stages.iter_mut().zip(&mut self.branches) {
            cur = stage.forward(tape, cur, train)?;
            outs.push(match branch {
                Resample::Down(conv) => conv.forward(tape, cur, train)?,
                Resample::Up(f, conv) => {
                    let up = tape.upsample_nearest(cur, *f)?;
                    conv.forward(tape, up, train)?
                }
            });
        }
        let cat = tape.concat(&outs, 1)?;
        self.fuse.forward(tape, cat, train)
    }
}

impl Module for Neck {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for (s, b) in self.stages.iter().zip(&self.branches) {
            s.visit(f);
            match b {
                Resample::Down(c) | Resample::Up(_, c) => c.visit(f),
            }
        }
        self.fuse.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (s, b) in self.stages.iter_mut().zip(&mut self.branches) {
            s.visit_mut(f);
            match b {
                Resample::Down(c) | Resample::Up(_, c) => c.visit_mut(f),
            }
        }
        self.fuse.visit_mut(f);
    }
}
