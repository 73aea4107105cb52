//! ViT-style visual encoder with per-block learnable prompt tokens.
//!
//! Each block sees the sequence `[CLS; prompts_l; patches]`. Prompt rows are
//! replaced at every block and stripped from the exposed features, so each
//! returned `H_l` has exactly `N` rows. The exposed `g` is the final block's
//! [CLS] row after the output norm and projection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SceneSample, IGNORE};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::numerics::{concat_rows, Tape, Tensor, Var};
use crate::text::ClassEmbeddingTable;
use crate::train::optim::{AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            blocks: 12,
            heads: 4,
            prompt_len: 50,
            mlp_ratio: 4,
            channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.dim == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Per-block patch tokens `H_l` (each `N×d`) and the global token `g` (`1×d`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub per_block: Vec<Tensor>,
    pub cls: Tensor,
}

/// Recorded counterpart of [`StageFeatures`].
pub struct StageVars<'t> {
    pub per_block: Vec<Var<'t>>,
    pub cls: Var<'t>,
}

/// Learnable `P×d` tokens for every block, named `prompts.block{l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub prompt_len: usize,
    pub store: ParamStore,
}

impl PromptBank {
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if config.prompt_len > 0 {
            for l in 1..=config.blocks {
                store.insert(
                    Self::name(l),
                    Tensor::randn([config.prompt_len, config.dim], 0.02, &mut rng),
                );
            }
        }
        PromptBank {
            prompt_len: config.prompt_len,
            store,
        }
    }

    pub fn empty() -> Self {
        PromptBank {
            prompt_len: 0,
            store: ParamStore::new(),
        }
    }

    pub fn name(block: usize) -> String {
        format!("prompts.block{block}")
    }
}

/// Splits an `H×W×C` image into row-major flattened patches, `N×(p·p·C)`.
pub fn patchify(image: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    let expect = [config.image_size, config.image_size, config.channels];
    if image.shape() != expect {
        return Err(Error::Geometry(format!(
            "image shape {:?} does not match encoder geometry {:?}",
            image.shape(),
            expect
        )));
    }
    let (p, c, g, side) = (config.patch_size, config.channels, config.grid(), config.image_size);
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                for x in 0..p {
                    let base = ((gy * p + y) * side + gx * p + x) * c;
                    out.extend_from_slice(&image.data()[base..base + c]);
                }
            }
        }
    }
    Tensor::matrix(g * g, config.patch_dim(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// Parameters named `encoder.*`.
    pub weights: ParamStore,
}

impl Encoder {
    /// An encoder without weights; [`Encoder::encode`] fails until
    /// weights are loaded or initialized.
    pub fn uninitialized(config: EncoderConfig) -> Self {
        Encoder {
            config,
            weights: ParamStore::new(),
        }
    }

    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut w = ParamStore::new();
        w.add_linear("encoder.patch", config.patch_dim(), d, &mut rng);
        w.insert("encoder.pos", Tensor::randn([config.num_tokens(), d], 0.1, &mut rng));
        w.insert("encoder.cls", Tensor::randn([1, d], 0.1, &mut rng));
        for l in 1..=config.blocks {
            let p = format!("encoder.block{l}");
            w.add_layer_norm(&format!("{p}.ln1"), d);
            w.add_attention(&format!("{p}.attn"), d, config.heads, &mut rng);
            w.add_layer_norm(&format!("{p}.ln2"), d);
            w.add_mlp(&format!("{p}.mlp"), d, d * config.mlp_ratio, &mut rng);
        }
        w.add_layer_norm("encoder.ln_post", d);
        w.insert(
            "encoder.proj",
            Tensor::randn([d, d], (1.0 / d as f64).sqrt(), &mut rng),
        );
        Ok(Encoder { config, weights: w })
    }

    pub fn is_initialized(&self) -> bool {
        !self.weights.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.is_initialized() && self.weights.iter().all(|(_, p)| p.frozen)
    }

    pub fn freeze(&mut self) {
        self.weights.set_frozen(true);
    }

    /// Records the forward pass. `bound` must hold the `encoder.*` entries
    /// and, when `prompt_len > 0`, the `prompts.block*` entries.
    pub fn forward<'t>(&self, bound: &Bound<'t>, patches: Var<'t>) -> Result<StageVars<'t>> {
        self.forward_with(bound, patches, self.config.prompt_len)
    }

    /// Forward pass with no prompt tokens in any block.
    pub fn forward_plain<'t>(&self, bound: &Bound<'t>, patches: Var<'t>) -> Result<StageVars<'t>> {
        self.forward_with(bound, patches, 0)
    }

    fn forward_with<'t>(&self, bound: &Bound<'t>, patches: Var<'t>, p: usize) -> Result<StageVars<'t>> {
        let cfg = &self.config;
        let n = cfg.num_tokens();
        let x = bound.linear("encoder.patch", patches)?;
        let mut tokens = x.add(bound.get("encoder.pos")?)?;
        let mut cls = bound.get("encoder.cls")?;
        let mut per_block = Vec::with_capacity(cfg.blocks);
        for l in 1..=cfg.blocks {
            let seq = if p > 0 {
                concat_rows(&[cls, bound.get(&PromptBank::name(l))?, tokens])?
            } else {
                concat_rows(&[cls, tokens])?
            };
            let out = self.block(bound, l, seq)?;
            cls = out.slice_rows(0, 1)?;
            tokens = out.slice_rows(1 + p, 1 + p + n)?;
            per_block.push(tokens);
        }
        let g = bound
            .layer_norm("encoder.ln_post", cls)?
            .matmul(bound.get("encoder.proj")?)?;
        Ok(StageVars { per_block, cls: g })
    }

    fn block<'t>(&self, bound: &Bound<'t>, l: usize, x: Var<'t>) -> Result<Var<'t>> {
        let p = format!("encoder.block{l}");
        let h = bound.layer_norm(&format!("{p}.ln1"), x)?;
        let x = x.add(bound.attention(&format!("{p}.attn"), h, h, self.config.heads)?)?;
        let h = bound.layer_norm(&format!("{p}.ln2"), x)?;
        x.add(bound.mlp(&format!("{p}.mlp"), h)?)
    }

    /// Evaluates the encoder on one image.
    pub fn encode(&self, image: &Tensor, prompts: &PromptBank) -> Result<StageFeatures> {
        if !self.is_initialized() {
            return Err(Error::invalid("encoder weights are not initialized"));
        }
        if prompts.prompt_len != self.config.prompt_len {
            return Err(Error::Geometry(format!(
                "prompt bank has {} tokens per block, encoder expects {}",
                prompts.prompt_len, self.config.prompt_len
            )));
        }
        let tape = Tape::new();
        let mut bound = Bound::default();
        for (name, p) in self.weights.iter().chain(prompts.store.iter()) {
            bound.insert(name.clone(), tape.constant(p.value.clone()));
        }
        let patches = tape.constant(patchify(image, &self.config)?);
        let out = self.forward(&bound, patches)?;
        Ok(StageFeatures {
            per_block: out.per_block.iter().map(|v| v.value().as_ref().clone()).collect(),
            cls: out.cls.value().as_ref().clone(),
        })
    }
}

/// Options for [`pretrain_backbone`].
#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Weight of the image-level presence term on `g`.
    pub presence_weight: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 500,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..Default::default()
            },
            seed: 0,
            presence_weight: 1.0,
        }
    }
}

/// Stable softmax cross-entropy of row-wise `logits` (`N×C`) against
/// `targets` (column index or `None` to skip), averaged over kept rows.
pub(crate) fn cross_entropy<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    targets: &[Option<usize>],
) -> Result<Var<'t>> {
    let v = logits.value();
    let (n, c) = v.dims2()?;
    let kept = targets.iter().filter(|t| t.is_some()).count();
    if kept == 0 {
        return Err(Error::invalid("cross-entropy over zero labeled rows"));
    }
    let mut shift = vec![0.0; n * c];
    let mut pick = vec![0.0; n * c];
    let mut keep = vec![0.0; n];
    for r in 0..n {
        let m = v.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[r * c..(r + 1) * c].fill(m);
        if let Some(t) = targets[r] {
            pick[r * c + t] = 1.0;
            keep[r] = 1.0;
        }
    }
    let z = logits.sub(tape.constant(Tensor::matrix(n, c, shift)?))?;
    let lse = z.exp()?.sum_axis(1)?.log()?; // N×1
    let chosen = z.mul(tape.constant(Tensor::matrix(n, c, pick)?))?.sum_axis(1)?;
    let per_row = lse.sub(chosen)?.mul(tape.constant(Tensor::matrix(n, 1, keep)?))?;
    per_row.sum()?.scale(1.0 / kept as f64)
}

/// Supervised stand-in pretraining on seen classes.
///
/// A throwaway linear pixel head maps final-block tokens into the class
/// embedding space, scored against `classes` by dot product; `g` is scored
/// the same way against the classes present in the image. Every encoder
/// weight is trained, then frozen. `class_ids[k]` is the global id of row
/// `k` of `classes`; labels outside it are skipped. Returns the per-step
/// mean loss.
pub fn pretrain_backbone(
    encoder: &mut Encoder,
    samples: &[SceneSample],
    classes: &ClassEmbeddingTable,
    class_ids: &[usize],
    opts: &PretrainOptions,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if classes.len() != class_ids.len() {
        return Err(Error::invalid("class table and id list differ in length"));
    }
    if !encoder.is_initialized() {
        return Err(Error::invalid("encoder weights are not initialized"));
    }
    let cfg = encoder.config.clone();
    let local: BTreeMap<usize, usize> = class_ids.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut head = ParamStore::new();
    head.add_linear("head", cfg.dim, classes.dim(), &mut rng);
    encoder.weights.set_frozen(false);
    let mut opt = AdamW::new(opts.optimizer);
    let mut head_opt = AdamW::new(opts.optimizer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let tape = Tape::new();
            let mut bound = Bound::default();
            encoder.weights.bind_into(&tape, &mut bound);
            head.bind_into(&tape, &mut bound);
            let result = (|| -> Result<Var<'_>> {
                let patches = tape.constant(patchify(&sample.image, &cfg)?);
                let feats = encoder.forward_plain(&bound, patches)?;
                let t = tape.constant(classes.table.clone());
                let last = *feats.per_block.last().expect("at least one block");
                let pix = bound
                    .linear("head", bound.layer_norm("encoder.ln_post", last)?)?
                    .matmul_t(t)?;
                let targets: Vec<Option<usize>> = sample
                    .label
                    .downsample(cfg.patch_size)?
                    .into_iter()
                    .map(|l| if l == IGNORE { None } else { local.get(&(l as usize)).copied() })
                    .collect();
                let mut loss = if targets.iter().any(|t| t.is_some()) {
                    cross_entropy(&tape, pix, &targets)?
                } else {
                    tape.constant(Tensor::scalar(0.0))
                };
                if opts.presence_weight > 0.0 {
                    let img = feats.cls.matmul_t(t)?; // 1×C
                    let y: Vec<f64> = class_ids
                        .iter()
                        .map(|g| if sample.present.contains(g) { 1.0 } else { 0.0 })
                        .collect();
                    let y = tape.constant(Tensor::matrix(1, y.len(), y.clone())?);
                    let ny = tape.constant(y.value().map(|v| 1.0 - v));
                    let bce = img
                        .log_sigmoid()?
                        .mul(y)?
                        .add(img.neg()?.log_sigmoid()?.mul(ny)?)?
                        .mean()?
                        .neg()?;
                    loss = loss.add(bce.scale(opts.presence_weight)?)?;
                }
                Ok(loss)
            })();
            let loss = result.map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            loss_sum += value;
            let grads = tape.backward(loss)?;
            for (name, g) in bound.grads(&grads)? {
                match acc.get_mut(&name) {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let scale = 1.0 / opts.batch_size as f64;
        for g in acc.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        opt.step(&mut encoder.weights, &acc);
        head_opt.step(&mut head, &acc);
        trace.push(loss_sum * scale);
    }
    encoder.freeze();
    Ok(trace)
}
