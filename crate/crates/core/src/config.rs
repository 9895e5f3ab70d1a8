//! Run configuration with JSON files and dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::backbone::BackboneConfig;
use crate::decode::MatchConfig;
use crate::error::{Error, Result};
use crate::fmf::FmfConfig;
use crate::head::HeadConfig;
use crate::losses::{FocalParams, LossWeights};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::schedule::OneCycle;
use crate::targets::TargetConfig;
use crate::voxel::{desk_pillar_config, GridConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    /// (low, high); momentum starts high, dips to low at the lr peak.
    pub momentum_range: (f64, f64),
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Frame pairs per optimizer step.
    pub batch_size: usize,
    /// Caps the total number of steps when set.
    pub max_steps: Option<usize>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub fmf: FmfConfig,
    pub grid: GridConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub targets: TargetConfig,
    pub focal: FocalParams,
    pub loss_weights: LossWeights,
    pub decode: MatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.003,
            weight_decay: 0.01,
            momentum_range: (0.85, 0.95),
            warmup_fraction: 0.4,
            epochs: 32,
            batch_size: 2,
            max_steps: None,
            grad_clip: Some(35.0),
            seed: 0,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            fmf: FmfConfig::default(),
            grid: desk_pillar_config(),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            targets: TargetConfig::default(),
            focal: FocalParams::default(),
            loss_weights: LossWeights::default(),
            decode: MatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid: self.grid.clone(),
            backbone: self.backbone.clone(),
            fmf: self.fmf.clone(),
            head: self.head.clone(),
            decode: self.decode.clone(),
        }
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            warmup_fraction: self.warmup_fraction,
            momentum_low: self.momentum_range.0,
            momentum_high: self.momentum_range.1,
            ..OneCycle::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        let (lo, hi) = self.momentum_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config("momentum_range must lie inside (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.schedule().validate()?;
        self.augment.validate()?;
        self.loss_weights.validate()?;
        if !(self.focal.alpha > 0.0 && self.focal.beta > 0.0) {
            return Err(Error::Config("focal exponents must be positive".into()));
        }
        if !(self.targets.min_overlap > 0.0 && self.targets.min_overlap < 1.0) {
            return Err(Error::Config("targets.min_overlap must lie in (0, 1)".into()));
        }
        let t = &self.decode.distance_thresholds;
        if t.is_empty() || t.iter().any(|v| !(*v > 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "decode.distance_thresholds must be positive and ascending".into(),
            ));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` where `key` is a dotted field path and `value` is
    /// JSON (bare words are taken as strings).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }
}
