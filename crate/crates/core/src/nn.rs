//! Parameters and the small layer set built on the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A named tensor owned by a model. Non-trainable params hold buffers such as
/// batch-norm running statistics.
#[derive(Debug)]
pub struct Param {
    id: u64,
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Clone for Param {
    /// Clones receive a fresh identity so they bind to separate tape leaves.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: self.name.clone(),
            value: self.value.clone(),
            trainable: self.trainable,
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }
}

fn uniform(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Kaiming-uniform weights for ReLU networks.
    pub fn new(name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(rng, [output, input], bound)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([output]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square odd kernel with "same" padding.
    pub fn new(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (input * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                uniform(rng, [output, input, kernel, kernel], bound),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([output]))),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over channels (axis 1) with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::full([channels], 1.0)),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// In training mode, normalizes by batch statistics and folds them into the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        train: bool,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        if !train {
            let (y, _) = tape.batch_norm(
                x,
                g,
                b,
                BnStats::Running {
                    mean: self.running_mean.value.data(),
                    var: self.running_var.value.data(),
                },
                self.eps,
                mask,
            )?;
            return Ok(y);
        }
        let (y, moments) = tape.batch_norm(x, g, b, BnStats::Batch, self.eps, mask)?;
        let moments = moments.ok_or_else(|| Error::State("missing batch moments".into()))?;
        let m = self.momentum;
        for (r, v) in self.running_mean.value.data_mut().iter_mut().zip(&moments.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.value.data_mut().iter_mut().zip(&moments.var) {
            *r = (1.0 - m) * *r + m * v;
        }
        Ok(y)
    }
}

impl Module for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Conv followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), input, output, kernel, stride, false, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), output),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, train, None)?;
        Ok(tape.relu(y))
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}
