//! Run configuration: a flat TOML key-value file. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{Aggregation, CascadeConfig, DecoderConfig, Fusion, ModeFlags, StagePlan, TextEmbedding};
use crate::data::UnseenPolicy;
use crate::encoder::{EncoderConfig, PretrainOptions};
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::text::TemplateMode;
use crate::train::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Encoder.
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub mlp_ratio: usize,

    // Head.
    pub stage_plan: StagePlan,
    pub aggregation: Aggregation,
    pub text_embedding: TextEmbedding,
    pub fusion: Fusion,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: usize,
    pub sigma_init: f64,

    // Objective.
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub focal_gamma: f64,
    /// Negative disables positive/negative balancing.
    pub focal_alpha: f64,
    pub dice_eps: f64,

    // Optimizer.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    // Schedule.
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub retrain_iterations: usize,
    pub retrain_lr: f64,
    pub pseudo_threshold: f64,

    // Data.
    pub seed: u64,
    /// Seeds the stand-in encoder and its pretraining; runs that differ
    /// only in `seed` share one frozen backbone.
    pub encoder_seed: u64,
    pub text_seed: u64,
    pub templates: TemplateMode,
    pub unseen_policy: UnseenPolicy,
    pub scene_seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    pub corpus: Option<PathBuf>,
    pub split: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        RunConfig {
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            dim: enc.dim,
            blocks: enc.blocks,
            heads: enc.heads,
            prompt_len: enc.prompt_len,
            mlp_ratio: enc.mlp_ratio,
            stage_plan: StagePlan::default_for(enc.blocks).expect("12 blocks"),
            aggregation: Aggregation::Nga,
            text_embedding: TextEmbedding::Independent,
            fusion: Fusion::Cascade,
            decoder_layers: 3,
            decoder_width: enc.dim,
            decoder_heads: 1,
            decoder_mlp_ratio: 2,
            sigma_init: 1.0,
            loss_alpha: 1.0,
            loss_beta: 100.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 200,
            batch_size: 4,
            eval_every: 50,
            pretrain_steps: 500,
            pretrain_batch: 4,
            pretrain_lr: 2e-3,
            retrain_iterations: 100,
            retrain_lr: 5e-4,
            pseudo_threshold: 0.9,
            seed: 0,
            encoder_seed: 0,
            text_seed: 0,
            templates: TemplateMode::Augmented,
            unseen_policy: UnseenPolicy::Ignore,
            scene_seed: 0,
            train_count: 256,
            eval_count: 64,
            corpus: None,
            split: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale settings for the synthetic benchmark: 32-pixel scenes,
    /// an 8×8 token grid and a 32-wide encoder.
    pub fn benchmark() -> Self {
        RunConfig {
            image_size: 32,
            patch_size: 4,
            dim: 32,
            blocks: 12,
            heads: 2,
            prompt_len: 4,
            mlp_ratio: 2,
            decoder_width: 32,
            lr: 2e-3,
            iterations: 600,
            batch_size: 4,
            eval_every: 100,
            pretrain_steps: 1000,
            pretrain_lr: 1e-3,
            retrain_iterations: 200,
            pseudo_threshold: 0.5,
            train_count: 384,
            eval_count: 96,
            ..RunConfig::default()
        }
    }

    /// A very small configuration for smoke tests and examples.
    pub fn tiny() -> Self {
        RunConfig {
            image_size: 32,
            patch_size: 8,
            dim: 16,
            blocks: 12,
            heads: 2,
            prompt_len: 2,
            mlp_ratio: 2,
            decoder_layers: 1,
            decoder_width: 16,
            iterations: 20,
            batch_size: 2,
            eval_every: 10,
            pretrain_steps: 20,
            pretrain_batch: 2,
            retrain_iterations: 10,
            train_count: 16,
            eval_count: 8,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&crate::error::read_text(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies `key=value` overrides; values are parsed as TOML, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = if key == "stage_plan" && !raw.starts_with('[') {
                let plan: StagePlan = raw.parse()?;
                toml::Value::try_from(&plan).map_err(|e| Error::Config(e.to_string()))?
            } else {
                toml::from_str::<toml::Table>(&format!("v = {raw}"))
                    .ok()
                    .and_then(|mut t| t.remove("v"))
                    .unwrap_or_else(|| toml::Value::String(raw.to_string()))
            };
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            prompt_len: self.prompt_len,
            mlp_ratio: self.mlp_ratio,
            channels: 3,
        }
    }

    pub fn flags(&self) -> ModeFlags {
        ModeFlags {
            aggregation: self.aggregation,
            text_embedding: self.text_embedding,
            fusion: self.fusion,
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            plan: self.stage_plan.clone(),
            flags: self.flags(),
            decoder: DecoderConfig {
                layers: self.decoder_layers,
                width: self.decoder_width,
                heads: self.decoder_heads,
                mlp_ratio: self.decoder_mlp_ratio,
            },
            sigma_init: self.sigma_init,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.loss_alpha,
            beta: self.loss_beta,
            gamma: self.focal_gamma,
            focal_alpha: (self.focal_alpha >= 0.0).then_some(self.focal_alpha),
            dice_eps: self.dice_eps,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn pretrain(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            optimizer: AdamWConfig {
                lr: self.pretrain_lr,
                ..self.optimizer()
            },
            seed: crate::data::derive_seed(self.encoder_seed, "pretrain", 0),
            presence_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.stage_plan.validate(self.blocks)?;
        self.cascade().decoder.validate()?;
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.sigma_init > 0.0) {
            return Err(Error::Config("sigma_init must be positive".into()));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::Config("pseudo_threshold must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) || !(self.retrain_lr > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the serialized config.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::benchmark();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::from_toml("iterations = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::from_toml("stage_plan = [[12]]\naggregation = \"sum\"\n").unwrap();
        assert_eq!(cfg.stage_plan, StagePlan::last_only(12));
        assert_eq!(cfg.aggregation, Aggregation::Sum);
        assert_eq!(cfg.loss_beta, 100.0);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&["fusion=naive", "iterations = 7", "stage_plan=[[11],[12]]"])
            .unwrap();
        assert_eq!(cfg.fusion, Fusion::Naive);
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.stage_plan.len(), 2);
        assert!(RunConfig::default().with_overrides(&["bogus=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["stage_plan=[[13]]"]).is_err());
    }
}
