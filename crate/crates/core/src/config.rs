//! Training configuration with named presets and JSON overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MimError, Result};
use crate::hierarchy::HierarchyConfig;
use crate::network::NetworkConfig;
use crate::objective::{AlignConfig, LossWeights};
use crate::optim::{cosine_lr, AdamWConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub hierarchy: HierarchyConfig,
    pub network: NetworkConfig,
    pub align: AlignConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            preset: Preset::Desk,
            steps: 300,
            batch_size: 2,
            base_lr: 1e-3,
            warmup_steps: 20,
            weight_decay: 1e-2,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            loss: LossWeights::default(),
            checkpoint_every: 50,
            hierarchy: HierarchyConfig::desk(),
            network: NetworkConfig::desk(),
            align: AlignConfig::default(),
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            preset: Preset::Paper,
            steps: 45_000,
            batch_size: 256,
            base_lr: 1e-4,
            warmup_steps: 100,
            checkpoint_every: 1000,
            hierarchy: HierarchyConfig::paper(),
            network: NetworkConfig::paper(),
            ..TrainConfig::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }

    /// Parses a JSON document whose fields override the preset it names
    /// (`"desk"` when absent). Nested objects merge field by field.
    pub fn from_json(text: &str) -> Result<Self> {
        let overrides: Value =
            serde_json::from_str(text).map_err(|e| MimError::Config(format!("config: {e}")))?;
        let Value::Object(_) = overrides else {
            return Err(MimError::Config("config must be a JSON object".into()));
        };
        let preset = match overrides.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| MimError::Config(format!("preset: {e}")))?,
        };
        let mut base = serde_json::to_value(TrainConfig::preset(preset)).expect("config serializes");
        merge(&mut base, overrides);
        let cfg: TrainConfig =
            serde_json::from_value(base).map_err(|e| MimError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MimError::io(path, e))?;
        TrainConfig::from_json(&text)
            .map_err(|e| MimError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MimError::Config("steps must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(MimError::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(MimError::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(MimError::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(MimError::Config("weight_decay must be non-negative".into()));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(MimError::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if !(self.eps > 0.0) {
            return Err(MimError::Config("eps must be positive".into()));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return Err(MimError::Config("alpha must be non-negative".into()));
        }
        if self.hierarchy.token_resize != self.network.token_resize {
            return Err(MimError::Config(format!(
                "hierarchy.token_resize {:?} differs from network.token_resize {:?}",
                self.hierarchy.token_resize, self.network.token_resize
            )));
        }
        self.hierarchy.validate()?;
        self.network.validate()?;
        self.align.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self.steps, self.warmup_steps, self.base_lr)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
