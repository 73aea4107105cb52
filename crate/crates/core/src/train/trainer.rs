//! Optimization loop, evaluation and the inductive/transductive pipelines.
//!
//! Random choices derive from the run seed through
//! [`derive_seed`]`(seed, tag, 0)` with tags `head`, `order` and `retrain`.
//! The backbone uses `encoder_seed` (tags `encoder`, `pretrain`) and scene
//! generation uses `scene_seed`, so runs with different seeds share data
//! and frozen encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::optim::AdamW;
use crate::cascade::CascadeModel;
use crate::data::{
    derive_seed, generate_range, load_corpus, make_inductive_view, pseudo_label_from_probs, save_corpus,
    upsample_tokens, SceneConfig, SceneSample, TrainingView, IGNORE,
};
use crate::encoder::{patchify, pretrain_backbone, Encoder};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::objective::{pixel_loss, Confusion, LossConfig, MetricsReport, Targets};
use crate::text::{embed_classes, ClassEmbeddingTable, ClassSplit};
use crate::train::optim::AdamWConfig;

/// Data, split and class table for one configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub split: ClassSplit,
    /// All classes in global order.
    pub classes: ClassEmbeddingTable,
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

impl Experiment {
    /// Loads `corpus/train` and `corpus/eval` when a corpus is configured,
    /// otherwise generates the synthetic benchmark at the encoder's image
    /// size.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let (split, train, eval) = match &config.corpus {
            Some(dir) => {
                let (m, train) = load_corpus(dir.join("train"))?;
                let (_, eval) = load_corpus(dir.join("eval"))?;
                (m.split, train, eval)
            }
            None => {
                let scenes = SceneConfig::benchmark_with_canvas(config.scene_seed, config.image_size)?;
                let train = generate_range(&scenes, 0, config.train_count)?;
                let eval = generate_range(&scenes, config.train_count, config.eval_count)?;
                (scenes.split(), train, eval)
            }
        };
        let split = match &config.split {
            Some(path) => {
                let s = ClassSplit::load(path)?;
                if s.names != split.names {
                    return Err(Error::Config("split file does not match corpus classes".into()));
                }
                s
            }
            None => split,
        };
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let classes = embed_classes(&split.names, config.text_seed, config.dim, config.templates)?;
        Ok(Experiment {
            split,
            classes,
            train,
            eval,
        })
    }

    pub fn inductive_view(&self, config: &RunConfig) -> TrainingView {
        make_inductive_view(&self.train, &self.split, config.unseen_policy)
    }
}

/// Writes the generated benchmark as `dir/train` and `dir/eval` corpora.
pub fn save_benchmark_corpus(dir: impl AsRef<Path>, config: &RunConfig) -> Result<()> {
    let scenes = SceneConfig::benchmark_with_canvas(config.scene_seed, config.image_size)?;
    let dir = dir.as_ref();
    save_corpus(dir.join("train"), &scenes, &generate_range(&scenes, 0, config.train_count)?)?;
    save_corpus(
        dir.join("eval"),
        &scenes,
        &generate_range(&scenes, config.train_count, config.eval_count)?,
    )
}

/// Seeded encoder, pretrained on the inductive view and frozen.
pub fn pretrained_encoder(config: &RunConfig, exp: &Experiment) -> Result<(Encoder, Vec<f64>)> {
    let mut encoder = Encoder::init(config.encoder(), derive_seed(config.encoder_seed, "encoder", 0))?;
    let view = exp.inductive_view(config);
    let seen = exp.classes.select(&view.classes)?;
    let trace = pretrain_backbone(&mut encoder, &view.samples, &seen, &view.classes, &config.pretrain())?;
    Ok((encoder, trace))
}

pub fn build_model(config: &RunConfig, mut encoder: Encoder) -> Result<CascadeModel> {
    encoder.config.prompt_len = config.prompt_len;
    encoder.freeze();
    CascadeModel::init(encoder, config.cascade(), derive_seed(config.seed, "head", 0))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        TrainOptions {
            iterations: config.iterations,
            batch_size: config.batch_size,
            eval_every: config.eval_every,
            loss: config.loss(),
            optimizer: config.optimizer(),
            seed: derive_seed(config.seed, "order", 0),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    /// Mean batch loss per iteration.
    pub trace: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

struct Prepared {
    patches: Tensor,
    targets: Targets,
}

/// Optimizes the prompts and head of `model` on `view`.
///
/// Training classes are `view.classes`; labels of other classes are
/// ignored. On a non-finite loss the failing step is not applied, so
/// `model` holds the last good parameters when the error is returned.
pub fn train_model(
    model: &mut CascadeModel,
    view: &TrainingView,
    classes: &ClassEmbeddingTable,
    opts: &TrainOptions,
    eval: Option<(&[SceneSample], &ClassSplit)>,
) -> Result<TrainOutcome> {
    let enc = model.encoder.config.clone();
    let local: BTreeMap<usize, u16> = view
        .classes
        .iter()
        .enumerate()
        .map(|(k, &g)| (g, k as u16))
        .collect();
    let table = classes.select(&view.classes)?;
    let mut data = Vec::with_capacity(view.samples.len());
    for s in &view.samples {
        let tokens: Vec<u16> = s
            .label
            .downsample(enc.patch_size)?
            .into_iter()
            .map(|l| local.get(&(l as usize)).copied().unwrap_or(IGNORE))
            .collect();
        if tokens.iter().all(|&t| t == IGNORE) {
            continue;
        }
        data.push(Prepared {
            patches: patchify(&s.image, &enc)?,
            targets: Targets::new(&tokens, table.len())?,
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut prompt_opt = AdamW::new(opts.optimizer);
    let mut head_opt = AdamW::new(opts.optimizer);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut out = TrainOutcome::default();
    for it in 0..opts.iterations {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0;
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &data[order[cursor]];
            cursor += 1;
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let step = || -> Result<_> {
                let fwd = model.forward_vars(&bound, tape.constant(item.patches.clone()), tape.constant(table.table.clone()))?;
                pixel_loss(&tape, &item.targets, fwd.fused, &opts.loss)
            };
            let loss = step().map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { step: it, loss: f64::NAN },
                other => other,
            })?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Divergence { step: it, loss: value });
            }
            total += value;
            let grads = tape.backward(loss)?;
            for (name, g) in bound.grads(&grads)? {
                match acc.get_mut(&name) {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let scale = 1.0 / opts.batch_size as f64;
        for g in acc.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        prompt_opt.step(&mut model.prompts.store, &acc);
        head_opt.step(&mut model.head, &acc);
        out.trace.push(total * scale);
        if let Some((samples, split)) = eval {
            if opts.eval_every > 0 && (it + 1) % opts.eval_every == 0 && !samples.is_empty() {
                out.evals.push(EvalPoint {
                    iteration: it + 1,
                    report: evaluate(model, samples, split, classes)?,
                });
            }
        }
    }
    Ok(out)
}

/// Token-level argmax of the fused probabilities over `classes`.
pub fn predict_tokens(model: &CascadeModel, image: &Tensor, classes: &ClassEmbeddingTable) -> Result<Vec<u16>> {
    let probs = model.forward_full(image, classes)?.probs;
    Ok(argmax_columns(&probs))
}

pub fn argmax_columns(probs: &Tensor) -> Vec<u16> {
    let (c, n) = (probs.rows(), probs.cols());
    (0..n)
        .map(|t| {
            let mut best = 0;
            for k in 1..c {
                if probs.at(k, t) > probs.at(best, t) {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

/// Full-class inference on every sample, upsampled to pixels.
pub fn evaluate(
    model: &CascadeModel,
    samples: &[SceneSample],
    split: &ClassSplit,
    classes: &ClassEmbeddingTable,
) -> Result<MetricsReport> {
    if classes.len() != split.len() || classes.names != split.names {
        return Err(Error::invalid("class table does not match the split"));
    }
    let enc = &model.encoder.config;
    let mut conf = Confusion::new(split.len());
    for s in samples {
        let tokens = predict_tokens(model, &s.image, classes)?;
        let pred = upsample_tokens(&tokens, enc.grid(), enc.patch_size);
        conf.add_maps(&pred, &s.label)?;
    }
    conf.report(split)
}

/// Result of one training run and its final evaluation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: CascadeModel,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Inductive training from a pretrained encoder.
pub fn run_inductive(config: &RunConfig, exp: &Experiment, encoder: Encoder) -> Result<RunResult> {
    let mut model = build_model(config, encoder)?;
    let view = exp.inductive_view(config);
    let outcome = train_model(
        &mut model,
        &view,
        &exp.classes,
        &TrainOptions::from_config(config),
        Some((&exp.eval, &exp.split)),
    )?;
    let report = evaluate(&model, &exp.eval, &exp.split, &exp.classes)?;
    Ok(RunResult { model, outcome, report })
}

/// Pseudo labels for the inductive view of the training set.
pub fn pseudo_label(
    model: &CascadeModel,
    exp: &Experiment,
    config: &RunConfig,
) -> Result<TrainingView> {
    let view = exp.inductive_view(config);
    let probs: Vec<Tensor> = view
        .samples
        .iter()
        .map(|s| Ok(model.forward_full(&s.image, &exp.classes)?.probs))
        .collect::<Result<_>>()?;
    let enc = &model.encoder.config;
    pseudo_label_from_probs(
        &view.samples,
        &probs,
        &exp.split,
        config.pseudo_threshold,
        enc.grid(),
        enc.patch_size,
    )
}

/// Continues training `model` on its own pseudo labels over all classes.
pub fn run_transductive(config: &RunConfig, exp: &Experiment, mut model: CascadeModel) -> Result<RunResult> {
    let view = pseudo_label(&model, exp, config)?;
    let opts = TrainOptions {
        iterations: config.retrain_iterations,
        seed: derive_seed(config.seed, "retrain", 0),
        optimizer: AdamWConfig {
            lr: config.retrain_lr,
            ..config.optimizer()
        },
        ..TrainOptions::from_config(config)
    };
    let outcome = train_model(&mut model, &view, &exp.classes, &opts, Some((&exp.eval, &exp.split)))?;
    let report = evaluate(&model, &exp.eval, &exp.split, &exp.classes)?;
    Ok(RunResult { model, outcome, report })
}

/// Loss trace as CSV with an `iteration,loss` header.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l:.12e}\n", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (RunConfig, Experiment) {
        let cfg = RunConfig::tiny();
        let exp = Experiment::prepare(&cfg).unwrap();
        (cfg, exp)
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let (mut cfg, exp) = tiny();
        cfg.iterations = 0;
        let enc = Encoder::init(cfg.encoder(), 3).unwrap();
        let fresh = build_model(&cfg, enc.clone()).unwrap();
        let run = run_inductive(&cfg, &exp, enc).unwrap();
        assert_eq!(run.model, fresh);
        assert!(run.outcome.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_backbone_alone() {
        let (mut cfg, exp) = tiny();
        cfg.iterations = 4;
        let enc = Encoder::init(cfg.encoder(), 3).unwrap();
        let a = run_inductive(&cfg, &exp, enc.clone()).unwrap();
        let b = run_inductive(&cfg, &exp, enc.clone()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.outcome.trace, b.outcome.trace);
        assert_eq!(a.model.encoder.weights.iter().map(|(_, p)| &p.value).collect::<Vec<_>>(),
                   enc.weights.iter().map(|(_, p)| &p.value).collect::<Vec<_>>());
        let fresh = build_model(&cfg, enc).unwrap();
        assert_ne!(a.model.prompts, fresh.prompts);
    }

    #[test]
    fn evaluation_order_does_not_matter() {
        let (cfg, exp) = tiny();
        let model = build_model(&cfg, Encoder::init(cfg.encoder(), 1).unwrap()).unwrap();
        let a = evaluate(&model, &exp.eval, &exp.split, &exp.classes).unwrap();
        let mut rev = exp.eval.clone();
        rev.reverse();
        assert_eq!(a, evaluate(&model, &rev, &exp.split, &exp.classes).unwrap());
        let wrong = exp.classes.select(&[0, 1]).unwrap();
        assert!(evaluate(&model, &exp.eval, &exp.split, &wrong).is_err());
    }

    #[test]
    fn training_view_leaves_unseen_undefined() {
        let (cfg, exp) = tiny();
        let model = build_model(&cfg, Encoder::init(cfg.encoder(), 1).unwrap()).unwrap();
        let view = exp.inductive_view(&cfg);
        let r = evaluate(&model, &view.samples, &exp.split, &exp.classes).unwrap();
        assert!(r.unseen_undefined);
    }
}
