//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PairConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::hne::HneConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;

/// Optimiser, schedule and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_lr: f64,
    /// Fraction of steps run at `warmup_lr`.
    pub warmup_fraction: f64,
    /// Fraction of steps with the backbone frozen.
    pub frozen_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Number of synthetic training scenes sampled from.
    pub train_scenes: usize,
    pub train_frames: usize,
    /// Distractor count per training scene is uniform in this range.
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            base_lr: 5e-3,
            final_lr: 5e-4,
            warmup_lr: 1e-3,
            warmup_fraction: 0.25,
            frozen_fraction: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            train_scenes: 400,
            train_frames: 100,
            min_distractors: 0,
            max_distractors: 3,
            log_every: 50,
        }
    }
}

impl TrainSettings {
    /// Learning rate of step `t`: constant warmup, then per-step geometric
    /// decay from `base_lr` to `final_lr`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let warm = self.warmup_steps();
        if t < warm {
            return self.warmup_lr;
        }
        let span = self.steps.saturating_sub(warm).saturating_sub(1).max(1) as f64;
        let frac = ((t - warm) as f64 / span).min(1.0);
        self.base_lr * (self.final_lr / self.base_lr).powf(frac)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.steps as f64 * self.warmup_fraction).round() as usize
    }

    pub fn frozen_steps(&self) -> usize {
        (self.steps as f64 * self.frozen_fraction).round() as usize
    }
}

/// Held-out synthetic test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub sequences: usize,
    pub frames: usize,
    /// Distractors per sequence in the hard set; the easy set has none.
    pub hard_distractors: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { sequences: 20, frames: 60, hard_distractors: 3, seed: 7_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    /// Seeds of an ablation run.
    pub seeds: Vec<u64>,
    pub train: TrainSettings,
    pub loss: LossWeights,
    pub hne: HneConfig,
    pub model: ModelConfig,
    pub pairs: PairConfig,
    pub scene: SceneConfig,
    pub eval: EvalSettings,
    pub tracker: TrackerConfig,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let pairs = PairConfig {
            exemplar_size: model.exemplar_size,
            instance_size: model.instance_size,
            max_translation: 64.0 * model.instance_size as f64 / 255.0,
            ..PairConfig::default()
        };
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            train: TrainSettings::default(),
            loss: LossWeights::default(),
            hne: HneConfig::default(),
            model,
            pairs,
            scene: SceneConfig::default(),
            eval: EvalSettings::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text)?;
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    /// Copies shared values into the sections that consume them.
    pub fn sync(&mut self) {
        self.model.embed_dim = self.hne.embed_dim;
        self.model.seed = self.seed;
        self.pairs.exemplar_size = self.model.exemplar_size;
        self.pairs.instance_size = self.model.instance_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hne.validate()?;
        self.scene.validate()?;
        self.tracker.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.train_scenes == 0 || t.train_frames < 2 {
            return Err(Error::Config("steps, batch_size, train_scenes must be positive and train_frames >= 2".into()));
        }
        if !(t.base_lr > 0.0 && t.final_lr > 0.0 && t.warmup_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.min_distractors > t.max_distractors {
            return Err(Error::Config("min_distractors exceeds max_distractors".into()));
        }
        if self.eval.sequences == 0 || self.eval.frames < 2 {
            return Err(Error::Config("eval needs sequences and at least two frames".into()));
        }
        Ok(())
    }

    /// Returns a copy with the dotted `key` set to `value`, a TOML literal
    /// (bare words are read as strings). `hne.rois = N` sets `hne.k = (N-1)/2`.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        if key == "hne.rois" {
            let n: usize = value.trim().parse().map_err(|_| Error::Config(format!("hne.rois expects a count, got {value}")))?;
            if n < 3 || n.is_multiple_of(2) {
                return Err(Error::Config(format!("hne.rois must be odd and at least 3, got {n}")));
            }
            return self.with_override("hne.k", &((n - 1) / 2).to_string());
        }
        let mut root: toml::Value = toml::Value::try_from(self).expect("config is serialisable");
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node.get_mut(*p).ok_or_else(|| Error::Config(format!("unknown config section in {key}")))?;
        }
        let last = parts[parts.len() - 1];
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("{key} is not inside a table")))?;
        if !table.contains_key(last) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        table.insert(last.to_string(), parsed);
        let mut c: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key} = {value}: {e}")))?;
        c.sync();
        c.validate()?;
        Ok(c)
    }
}

/// Parses `KEY=V1,V2,...`.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = spec.split_once('=').ok_or_else(|| Error::Config(format!("sweep must look like KEY=V1,V2: {spec}")))?;
    let vals: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if k.trim().is_empty() || vals.is_empty() {
        return Err(Error::Config(format!("empty sweep: {spec}")));
    }
    Ok((k.trim().to_string(), vals))
}
