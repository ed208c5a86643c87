//! Run configuration (JSON). Every section has defaults; unknown keys are
//! rejected so that typos fail before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::DegradationRanges;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{DenoiserConfig, RestorerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Restore,
    Denoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Iterations at which the learning rate is halved.
    pub milestones: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning-rate multiplier applied when finetuning from a checkpoint.
    pub finetune_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 2e-3, milestones: Vec::new(), beta1: 0.9, beta2: 0.999, finetune_lr_scale: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub noise: u64,
    pub extractor: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 1, data: 2, noise: 3, extractor: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Directory written by `gen-toyfaces`; generated in memory when absent.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { train_dir: None, val_dir: None, train_count: 2000, val_count: 64, size: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorPretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PriorPretrainConfig {
    fn default() -> Self {
        Self { iterations: 1500, lr: 2e-3, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub arch: DenoiserConfig,
    /// Noise standard deviation on the 0–255 scale.
    pub noise_level: f64,
    /// Provenance tag stored in checkpoints; defaults to `N<level>`.
    pub provenance: Option<String>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { arch: DenoiserConfig::default(), noise_level: 20.0, provenance: None }
    }
}

impl DenoiseConfig {
    pub fn tag(&self) -> String {
        self.provenance.clone().unwrap_or_else(|| format!("N{}", self.noise_level))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub architecture: RestorerConfig,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Pyramid loss is active while `iteration < pyramid_cutoff`; half the
    /// run when absent.
    pub pyramid_cutoff: Option<usize>,
    pub component_patch: usize,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub seeds: Seeds,
    pub corpus: CorpusConfig,
    pub degradation: DegradationRanges,
    pub prior_checkpoint: Option<PathBuf>,
    pub prior_pretrain: PriorPretrainConfig,
    pub denoise: DenoiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Restore,
            architecture: RestorerConfig::default(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            iterations: 5000,
            batch_size: 4,
            pyramid_cutoff: None,
            component_patch: 8,
            checkpoint_every: 1000,
            val_every: 500,
            seeds: Seeds::default(),
            corpus: CorpusConfig::default(),
            degradation: DegradationRanges::default(),
            prior_checkpoint: None,
            prior_pretrain: PriorPretrainConfig::default(),
            denoise: DenoiseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn pyramid_cutoff(&self) -> usize {
        self.pyramid_cutoff.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.architecture.validate()?;
        self.loss_weights.validate()?;
        self.degradation.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.finetune_lr_scale > 0.0) {
            return bad(format!("learning rate settings must be positive: {o:?}"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("Adam betas must lie in [0, 1): {o:?}"));
        }
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", o.milestones));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.val_every == 0 {
            return bad("batch_size, checkpoint_every and val_every must be ≥ 1".into());
        }
        if self.component_patch < 4 {
            return bad(format!("component_patch {} below 4", self.component_patch));
        }
        let c = &self.corpus;
        if c.size != self.architecture.unet.image_size {
            return bad(format!("corpus size {} differs from the architecture's {}", c.size, self.architecture.unet.image_size));
        }
        if c.train_dir.is_none() && c.train_count == 0 {
            return bad("empty training corpus".into());
        }
        if !(self.denoise.noise_level >= 0.0 && self.denoise.noise_level.is_finite()) {
            return bad(format!("noise level {} must be ≥ 0", self.denoise.noise_level));
        }
        if self.prior_pretrain.batch_size == 0 || !(self.prior_pretrain.lr > 0.0) {
            return bad(format!("invalid prior pretraining settings {:?}", self.prior_pretrain));
        }
        Ok(())
    }
}
