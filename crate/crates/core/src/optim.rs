//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(35.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// One entry per trainable parameter in visit order.
    pub moments: Vec<Moments>,
}

/// Gradients of every parameter of `model` in visit order (`None` for
/// buffers and for parameters the loss did not reach).
pub fn collect_grads<M: Module + ?Sized>(model: &M, tape: &Tape) -> Vec<Option<Tensor>> {
    let mut out = Vec::new();
    model.visit(&mut |p: &Param| {
        out.push(if p.trainable {
            tape.param_grad(p).cloned()
        } else {
            None
        })
    });
    out
}

impl AdamW {
    pub fn new<M: Module + ?Sized>(cfg: AdamWConfig, model: &M) -> Self {
        let mut moments = Vec::new();
        model.visit(&mut |p: &Param| {
            if p.trainable {
                moments.push(Moments {
                    name: p.name.clone(),
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                });
            }
        });
        Self {
            cfg,
            step: 0,
            moments,
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// One update. `grads` are in visit order as produced by [`collect_grads`];
    /// missing gradients count as zero.
    pub fn update<M: Module + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &[Option<Tensor>],
        lr: f64,
        beta1: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b2, eps, wd) = (self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let clip = match self.cfg.grad_clip {
            Some(max) => {
                let n = Self::grad_norm(grads);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let mut idx = 0;
        let mut slot = 0;
        let mut err = None;
        let moments = &mut self.moments;
        model.visit_mut(&mut |p: &mut Param| {
            let g = grads.get(idx).and_then(|g| g.as_ref());
            idx += 1;
            if !p.trainable || err.is_some() {
                return;
            }
            let Some(mo) = moments.get_mut(slot) else {
                err = Some(Error::State("optimizer does not match model".into()));
                return;
            };
            slot += 1;
            if mo.m.len() != p.numel() || mo.name != p.name {
                err = Some(Error::State(format!(
                    "optimizer state for {} does not match parameter {}",
                    mo.name, p.name
                )));
                return;
            }
            let data = p.value.data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]) * clip;
                data[k] *= 1.0 - lr * wd;
                mo.m[k] = beta1 * mo.m[k] + (1.0 - beta1) * gk;
                mo.v[k] = b2 * mo.v[k] + (1.0 - b2) * gk * gk;
                let mhat = mo.m[k] / bc1;
                let vhat = mo.v[k] / bc2;
                data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
