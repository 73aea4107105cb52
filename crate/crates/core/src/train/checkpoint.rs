//! Checkpoint directories: `manifest.json` plus `params.tensors`, the
//! concatenated tensor dumps in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::cascade::{CascadeModel, StagePlan};
use crate::encoder::{Encoder, PromptBank};
use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore};
use crate::numerics::io::{load_tensors, save_tensors};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub stage_plan: String,
    pub iteration: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub params: ParamStore,
}

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.tensors";

impl Checkpoint {
    pub fn from_model(model: &CascadeModel, config: &RunConfig, iteration: usize) -> Self {
        let mut params = model.encoder.weights.clone();
        params.extend(model.prompts.store.clone());
        params.extend(model.head.clone());
        Checkpoint {
            config: config.clone(),
            iteration,
            params,
        }
    }

    /// Encoder-only checkpoint, as written after pretraining.
    pub fn from_encoder(encoder: &Encoder, config: &RunConfig, iteration: usize) -> Self {
        Checkpoint {
            config: config.clone(),
            iteration,
            params: encoder.weights.clone(),
        }
    }

    /// The frozen encoder stored in this checkpoint.
    pub fn encoder(&self) -> Result<Encoder> {
        let mut encoder = Encoder::uninitialized(self.config.encoder());
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
            encoder.weights.insert_param(name.clone(), p.clone());
        }
        let reference = Encoder::init(self.config.encoder(), 0)?;
        let layout = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.iter().map(|(n, p)| (n.clone(), p.value.shape().to_vec())).collect()
        };
        if layout(&reference.weights) != layout(&encoder.weights) {
            return Err(Error::Config("checkpoint encoder does not match the configured geometry".into()));
        }
        encoder.freeze();
        Ok(encoder)
    }

    /// Whether the checkpoint carries prompts or head parameters.
    pub fn has_head(&self) -> bool {
        self.params.iter().any(|(n, _)| !n.starts_with("encoder."))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            stage_plan: self.config.stage_plan.to_string(),
            iteration: self.iteration,
            tensors: self
                .params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(&self.manifest())?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST), text)?;
        save_tensors(dir.join(PARAMS), self.params.iter().map(|(_, p)| &p.value))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_str(&crate::error::read_text(&path)?)?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::format(&path, "config hash does not match config"));
        }
        if manifest.config.stage_plan.to_string() != manifest.stage_plan {
            return Err(Error::format(&path, "stage plan does not match config"));
        }
        let tensors = load_tensors(dir.join(PARAMS))?;
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::format(
                dir.join(PARAMS),
                format!("{} tensors, manifest lists {}", tensors.len(), manifest.tensors.len()),
            ));
        }
        let mut params = ParamStore::new();
        for (entry, value) in manifest.tensors.iter().zip(tensors) {
            if value.shape() != entry.shape.as_slice() {
                return Err(Error::format(
                    dir.join(PARAMS),
                    format!("tensor {} has shape {:?}, manifest says {:?}", entry.name, value.shape(), entry.shape),
                ));
            }
            params.insert_param(
                entry.name.clone(),
                Param {
                    value,
                    frozen: entry.frozen,
                },
            );
        }
        Ok(Checkpoint {
            config: manifest.config,
            iteration: manifest.iteration,
            params,
        })
    }

    /// Rebuilds the model. Fails if `expected_plan` differs from the plan
    /// the checkpoint was trained with.
    pub fn to_model(&self, expected_plan: Option<&StagePlan>) -> Result<CascadeModel> {
        if let Some(plan) = expected_plan {
            if plan != &self.config.stage_plan {
                return Err(Error::Config(format!(
                    "checkpoint stage plan {} does not match requested plan {plan}",
                    self.config.stage_plan
                )));
            }
        }
        let mut encoder = Encoder::uninitialized(self.config.encoder());
        let mut prompts = PromptBank::empty();
        prompts.prompt_len = self.config.prompt_len;
        let mut head = ParamStore::new();
        for (name, p) in self.params.iter() {
            let target = if name.starts_with("encoder.") {
                &mut encoder.weights
            } else if name.starts_with("prompts.") {
                &mut prompts.store
            } else {
                &mut head
            };
            target.insert_param(name.clone(), p.clone());
        }
        let cfg = self.config.cascade();
        // A freshly initialized model must have exactly the same layout.
        let reference = CascadeModel::init(Encoder::init(self.config.encoder(), 0)?, cfg.clone(), 0)?;
        let layout = |s: &ParamStore| -> BTreeMap<String, Vec<usize>> {
            s.iter().map(|(n, p)| (n.clone(), p.value.shape().to_vec())).collect()
        };
        if layout(&reference.head) != layout(&head)
            || layout(&reference.prompts.store) != layout(&prompts.store)
            || (encoder.is_initialized() && layout(&reference.encoder.weights) != layout(&encoder.weights))
        {
            return Err(Error::Config("checkpoint tensors do not match the configured model layout".into()));
        }
        Ok(CascadeModel {
            encoder,
            prompts,
            head,
            config: cfg,
        })
    }
}

/// Exact parameter counts by section (`encoder`, `prompts`, `decoder`,
/// `text.proj`, `nga`, `agg`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ParamCounts {
    pub sections: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn section_of(name: &str) -> &str {
    if name.starts_with("text.proj.") {
        return "text.proj";
    }
    name.split('.').next().unwrap_or(name)
}

pub fn count_parameters(params: &ParamStore, trainable_only: bool) -> ParamCounts {
    let mut out = ParamCounts::default();
    for (name, p) in params.iter() {
        if trainable_only && p.frozen {
            continue;
        }
        *out.sections.entry(section_of(name).to_string()).or_default() += p.value.numel();
        out.total += p.value.numel();
    }
    out
}
