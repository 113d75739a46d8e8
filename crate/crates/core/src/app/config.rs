//! Run configuration.
//!
//! Files are TOML. Keys may be written as dotted paths at top level
//! (`model.hidden_dim = 64`) or grouped in tables; every key has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use crate::datagen::SceneConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::matching::MatchCostWeights;
use crate::model::ModelConfig;

/// Environment variable that anchors relative output and data paths.
pub const OUTPUT_ROOT_ENV: &str = "MORPHDET_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            n_train: 200,
            n_val: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Re-match every decoder layer; otherwise all layers reuse the last
    /// layer's assignment.
    pub per_layer: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        let w = MatchCostWeights::default();
        Self {
            class: w.class,
            l1: w.l1,
            giou: w.giou,
            per_layer: true,
        }
    }
}

impl MatcherConfig {
    pub fn weights(&self) -> MatchCostWeights {
        MatchCostWeights {
            class: self.class,
            l1: self.l1,
            giou: self.giou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Fraction of the run spent on linear warm-up.
    pub warmup_fraction: f64,
    /// Final step size as a fraction of `lr` after cosine decay; 1 keeps it flat.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_fraction: 0.1,
            final_lr_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Validation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub augment: AugmentConfig,
    /// Split used to pick the best checkpoint.
    pub eval_split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            eval_every: 0,
            checkpoint_every: 500,
            out_dir: PathBuf::from("runs/default"),
            augment: AugmentConfig::default(),
            eval_split: "val".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub batch_size: usize,
    pub split: String,
    /// Attach latency measurements to the evaluation report.
    pub latency: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            batch_size: 16,
            split: "val".into(),
            latency: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub out_dir: PathBuf,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            out_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.2, 0.5, 1.0, 2.0],
            out_dir: PathBuf::from("runs/ablate_lambda"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, batch order and augmentation.
    pub seed: u64,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub matcher: MatcherConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub infer: InferConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(&e)))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Checks cross-field consistency and copies the run seed into the model.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.init_seed = self.seed;
        self.model.validate()?;
        self.scene.validate()?;
        self.loss.validate()?;
        self.loss.alpha(self.model.num_decoder_layers)
            .map_err(|_| Error::Config(format!(
                "loss.alpha_layers has {} entries but the decoder has {} layers",
                self.loss.alpha_layers.len(),
                self.model.num_decoder_layers
            )))?;
        self.matcher.weights().validate()?;
        self.train.augment.validate()?;
        if self.scene.width as usize != self.model.image_width
            || self.scene.height as usize != self.model.image_height
        {
            return Err(Error::Config(format!(
                "scene size {}x{} differs from model input {}x{}",
                self.scene.width, self.scene.height, self.model.image_width, self.model.image_height
            )));
        }
        if self.train.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.warmup_fraction) || !(0.0..=1.0).contains(&o.final_lr_fraction) {
            return Err(Error::Config("optim.warmup_fraction must be in [0, 1) and optim.final_lr_fraction in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config("optim.beta1/beta2 must be in [0, 1) and optim.eps positive".into()));
        }
        if o.weight_decay < 0.0 || o.clip_norm < 0.0 {
            return Err(Error::Config("optim.weight_decay and optim.clip_norm must be non-negative".into()));
        }
        for t in [self.eval.score_threshold, self.infer.score_threshold] {
            if !(0.0..=1.01).contains(&t) {
                return Err(Error::Config(format!("score threshold {t} outside [0, 1]")));
            }
        }
        Ok(self)
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}

/// Anchors a relative path at the output root, if one is set.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
