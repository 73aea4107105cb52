use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nga::{nga_aggregate_var, softplus, softplus_inv};
use super::plan::{Aggregation, Fusion, ModeFlags, StagePlan, TextEmbedding};
use crate::encoder::{patchify, Encoder, PromptBank};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::numerics::{concat_last, softmax_tensor, Tape, Tensor, Var};
use crate::text::{descriptor, ClassEmbeddingTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            width: 64,
            heads: 1,
            mlp_ratio: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Everything downstream of the encoder that shapes the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub plan: StagePlan,
    pub flags: ModeFlags,
    pub decoder: DecoderConfig,
    pub sigma_init: f64,
}

impl CascadeConfig {
    pub fn new(plan: StagePlan) -> Self {
        CascadeConfig {
            plan,
            flags: ModeFlags::default(),
            decoder: DecoderConfig::default(),
            sigma_init: 1.0,
        }
    }

    /// Number of decoders actually instantiated.
    pub fn decoders(&self) -> usize {
        match self.flags.fusion {
            Fusion::Cascade => self.plan.len(),
            Fusion::Naive => 1,
        }
    }
}

pub fn decoder_prefix(stage: usize) -> String {
    format!("decoder.s{stage}")
}

fn text_proj_prefix(flags: &ModeFlags, stage: usize) -> String {
    match flags.text_embedding {
        TextEmbedding::Independent => format!("text.proj.s{stage}"),
        TextEmbedding::Shared => "text.proj.shared".to_string(),
    }
}

pub fn add_decoder(store: &mut ParamStore, stage: usize, dim: usize, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) {
    let p = decoder_prefix(stage);
    let w = cfg.width;
    store.add_layer_norm(&format!("{p}.ln_kv"), dim);
    store.add_linear(&format!("{p}.phi_k"), dim, w, rng);
    for l in 1..=cfg.layers {
        let q = format!("{p}.layer{l}");
        store.add_layer_norm(&format!("{q}.ln_q"), w);
        store.add_attention(&format!("{q}.attn"), w, cfg.heads, rng);
        store.add_layer_norm(&format!("{q}.ln_m"), w);
        store.add_mlp(&format!("{q}.mlp"), w, w * cfg.mlp_ratio, rng);
    }
    store.add_layer_norm(&format!("{p}.ln_out"), w);
}

/// Text-image decoder: `queries` (`C×w`) attend over projected visual
/// tokens; returns `C×N` logits `q·kᵀ/√w`.
pub fn decode_vars<'t>(
    bound: &Bound<'t>,
    stage: usize,
    cfg: &DecoderConfig,
    queries: Var<'t>,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let p = decoder_prefix(stage);
    let kv = bound.linear(&format!("{p}.phi_k"), bound.layer_norm(&format!("{p}.ln_kv"), z)?)?;
    let mut q = queries;
    for l in 1..=cfg.layers {
        let pre = format!("{p}.layer{l}");
        let h = bound.layer_norm(&format!("{pre}.ln_q"), q)?;
        q = q.add(bound.attention(&format!("{pre}.attn"), h, kv, cfg.heads)?)?;
        let h = bound.layer_norm(&format!("{pre}.ln_m"), q)?;
        q = q.add(bound.mlp(&format!("{pre}.mlp"), h)?)?;
    }
    let q = bound.layer_norm(&format!("{p}.ln_out"), q)?;
    q.matmul_t(kv)?.scale(1.0 / (cfg.width as f64).sqrt())
}

/// Unrecorded single decoder: the descriptor is projected with
/// `text.proj.s{stage}` (or the shared map) and decoded against `z`.
pub fn decode_stage(
    descriptor: &Tensor,
    z: &Tensor,
    head: &ParamStore,
    flags: &ModeFlags,
    stage: usize,
    cfg: &DecoderConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = constants(&tape, head.iter().map(|(n, p)| (n, &p.value)));
    let q = bound.linear(&text_proj_prefix(flags, stage), tape.constant(descriptor.clone()))?;
    let m = decode_vars(&bound, stage, cfg, q, tape.constant(z.clone()))?;
    Ok(m.value().as_ref().clone())
}

fn constants<'t, 'a>(tape: &'t Tape, items: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Bound<'t> {
    Bound::from_pairs(items.map(|(n, t)| (n.clone(), tape.constant(t.clone()))))
}

/// Softmax over classes of the element-wise sum of per-stage logits.
pub fn cascade_masks(per_stage: &[Tensor]) -> Result<Tensor> {
    let first = per_stage
        .first()
        .ok_or_else(|| Error::invalid("cascade over zero stages"))?;
    let mut sum = first.clone();
    for m in &per_stage[1..] {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "cascade_masks",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for (a, b) in sum.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    first.dims2()?;
    Ok(softmax_tensor(&sum, 0))
}

pub struct CascadeVars<'t> {
    pub stage_logits: Vec<Var<'t>>,
    /// Pre-softmax sum over stages, `C×N`.
    pub fused: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub stage_logits: Vec<Tensor>,
    pub fused_logits: Tensor,
    /// Column-stochastic `C×N`.
    pub probs: Tensor,
}

/// Frozen encoder, prompt bank and trainable head.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub encoder: Encoder,
    pub prompts: PromptBank,
    /// Parameters named `decoder.*`, `text.proj.*`, `nga.*` and `agg.*`.
    pub head: ParamStore,
    pub config: CascadeConfig,
}

impl CascadeModel {
    pub fn init(encoder: Encoder, config: CascadeConfig, seed: u64) -> Result<Self> {
        encoder.config.validate()?;
        config.plan.validate(encoder.config.blocks)?;
        config.decoder.validate()?;
        if !(config.sigma_init > 0.0) {
            return Err(Error::Config(format!("sigma_init must be positive, got {}", config.sigma_init)));
        }
        let d = encoder.config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = PromptBank::init(&encoder.config, crate::data::derive_seed(seed, "prompts", 0));
        let mut head = ParamStore::new();
        let w = config.decoder.width;
        for s in 1..=config.decoders() {
            add_decoder(&mut head, s, d, &config.decoder, &mut rng);
            let proj = text_proj_prefix(&config.flags, s);
            if head.get(&format!("{proj}.w")).is_none() {
                head.add_linear(&proj, 2 * d, w, &mut rng);
            }
            if config.flags.fusion == Fusion::Naive {
                continue;
            }
            let k = config.plan.stages[s - 1].len();
            match config.flags.aggregation {
                Aggregation::Nga => {
                    head.insert(format!("nga.s{s}.rho"), Tensor::scalar(softplus_inv(config.sigma_init)))
                }
                Aggregation::Sum => {}
                Aggregation::Concat => head.add_linear(&format!("agg.s{s}.concat"), k * d, d, &mut rng),
                Aggregation::SelfAttention => {
                    let std = (1.0 / d as f64).sqrt();
                    head.insert(format!("agg.s{s}.q.w"), Tensor::randn([d, d], std, &mut rng));
                    head.insert(format!("agg.s{s}.k.w"), Tensor::randn([d, d], std, &mut rng));
                }
            }
        }
        Ok(CascadeModel {
            encoder,
            prompts,
            head,
            config,
        })
    }

    /// Current σ per stage (empty unless aggregation is NGA).
    pub fn sigmas(&self) -> Vec<f64> {
        (1..=self.config.plan.len())
            .filter_map(|s| self.head.get(&format!("nga.s{s}.rho")))
            .map(|p| softplus(p.value.data()[0]))
            .collect()
    }

    /// Records every parameter; frozen ones as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut b = Bound::default();
        self.encoder.weights.bind_into(tape, &mut b);
        self.prompts.store.bind_into(tape, &mut b);
        self.head.bind_into(tape, &mut b);
        b
    }

    fn aggregate<'t>(&self, bound: &Bound<'t>, stage: usize, blocks: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = blocks[0].tape();
        match self.config.flags.aggregation {
            Aggregation::Nga => nga_aggregate_var(blocks, bound.get(&format!("nga.s{stage}.rho"))?),
            Aggregation::Sum => sum_vars(blocks),
            Aggregation::Concat => {
                let joined = if blocks.len() == 1 { blocks[0] } else { concat_last(blocks)? };
                bound.linear(&format!("agg.s{stage}.concat"), joined)
            }
            Aggregation::SelfAttention => {
                // Each token's block-mean queries its own k block features.
                let k = blocks.len();
                let d = self.encoder.config.dim;
                let mean = sum_vars(blocks)?.scale(1.0 / k as f64)?;
                let q = mean.matmul(bound.get(&format!("agg.s{stage}.q.w"))?)?;
                let wk = bound.get(&format!("agg.s{stage}.k.w"))?;
                let scores: Vec<Var<'t>> = blocks
                    .iter()
                    .map(|h| q.mul(h.matmul(wk)?)?.sum_axis(1)?.scale(1.0 / (d as f64).sqrt()))
                    .collect::<Result<_>>()?;
                let attn = if k == 1 { scores[0] } else { concat_last(&scores)? }.softmax(1)?;
                let mut z: Option<Var<'t>> = None;
                for (l, h) in blocks.iter().enumerate() {
                    let mut sel = vec![0.0; k * d];
                    sel[l * d..(l + 1) * d].fill(1.0);
                    let spread = attn.matmul(tape.constant(Tensor::matrix(k, d, sel)?))?;
                    let term = spread.mul(*h)?;
                    z = Some(match z {
                        None => term,
                        Some(acc) => acc.add(term)?,
                    });
                }
                Ok(z.expect("nonempty"))
            }
        }
    }

    /// Records the full pipeline for one image. `text` is the `C×d` class
    /// table used for this pass.
    pub fn forward_vars<'t>(&self, bound: &Bound<'t>, patches: Var<'t>, text: Var<'t>) -> Result<CascadeVars<'t>> {
        let feats = self.encoder.forward(bound, patches)?;
        let t_hat = descriptor(text, feats.cls)?;
        let cfg = &self.config;
        let pick = |blocks: &[usize]| -> Vec<Var<'t>> {
            blocks.iter().map(|&b| feats.per_block[b - 1]).collect()
        };
        let mut stage_logits = Vec::with_capacity(cfg.decoders());
        match cfg.flags.fusion {
            Fusion::Naive => {
                let z = sum_vars(&pick(&cfg.plan.union()))?;
                let q = bound.linear(&text_proj_prefix(&cfg.flags, 1), t_hat)?;
                stage_logits.push(decode_vars(bound, 1, &cfg.decoder, q, z)?);
            }
            Fusion::Cascade => {
                for (i, blocks) in cfg.plan.stages.iter().enumerate() {
                    let s = i + 1;
                    let z = self.aggregate(bound, s, &pick(blocks))?;
                    let q = bound.linear(&text_proj_prefix(&cfg.flags, s), t_hat)?;
                    stage_logits.push(decode_vars(bound, s, &cfg.decoder, q, z)?);
                }
            }
        }
        let fused = sum_vars(&stage_logits)?;
        Ok(CascadeVars { stage_logits, fused })
    }

    /// Unrecorded inference over `classes`.
    pub fn forward_full(&self, image: &Tensor, classes: &ClassEmbeddingTable) -> Result<CascadeOutput> {
        if classes.dim() != self.encoder.config.dim {
            return Err(Error::ShapeMismatch {
                op: "forward_full",
                lhs: vec![classes.len(), classes.dim()],
                rhs: vec![classes.len(), self.encoder.config.dim],
            });
        }
        if !self.encoder.is_initialized() {
            return Err(Error::invalid("encoder weights are not initialized"));
        }
        let tape = Tape::new();
        let bound = constants(
            &tape,
            self.encoder
                .weights
                .iter()
                .chain(self.prompts.store.iter())
                .chain(self.head.iter())
                .map(|(n, p)| (n, &p.value)),
        );
        let patches = tape.constant(patchify(image, &self.encoder.config)?);
        let text = tape.constant(classes.table.clone());
        let out = self.forward_vars(&bound, patches, text)?;
        let stage_logits: Vec<Tensor> = out.stage_logits.iter().map(|v| v.value().as_ref().clone()).collect();
        let fused_logits = out.fused.value().as_ref().clone();
        let probs = softmax_tensor(&fused_logits, 0);
        Ok(CascadeOutput {
            stage_logits,
            fused_logits,
            probs,
        })
    }
}

/// Sum of one or more same-shape values; a single value is returned as is.
pub fn sum_vars<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::invalid("sum over zero values"))?;
    rest.iter().try_fold(*first, |acc, v| acc.add(*v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::text::{embed_classes, relationship_descriptor, TemplateMode};

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 2,
            dim: 8,
            blocks: 4,
            heads: 2,
            prompt_len: 2,
            mlp_ratio: 2,
            channels: 3,
        }
    }

    fn model(plan: &str, flags: ModeFlags) -> CascadeModel {
        let enc = Encoder::init(enc_cfg(), 1).unwrap();
        let mut cfg = CascadeConfig::new(plan.parse().unwrap());
        cfg.flags = flags;
        cfg.decoder = DecoderConfig {
            layers: 2,
            width: 8,
            heads: 1,
            mlp_ratio: 2,
        };
        CascadeModel::init(enc, cfg, 7).unwrap()
    }

    fn classes(c: usize) -> ClassEmbeddingTable {
        let names: Vec<String> = (0..c).map(|i| format!("class{i}")).collect();
        embed_classes(&names, 3, 8, TemplateMode::Single).unwrap()
    }

    fn image() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Tensor::uniform([8, 8, 3], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn shapes_and_normalization() {
        let m = model("2|3|4", ModeFlags::default());
        let out = m.forward_full(&image(), &classes(5)).unwrap();
        assert_eq!(out.stage_logits.len(), 3);
        assert!(out.stage_logits.iter().all(|s| s.shape() == [5, 16]));
        for n in 0..16 {
            let col: f64 = (0..5).map(|c| out.probs.at(c, n)).sum();
            assert!((col - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_stage_is_one_decoder() {
        let flags = ModeFlags {
            aggregation: Aggregation::Sum,
            ..Default::default()
        };
        let m = model("4", flags);
        let t = classes(3);
        let out = m.forward_full(&image(), &t).unwrap();
        let f = m.encoder.encode(&image(), &m.prompts).unwrap();
        let d = relationship_descriptor(&t.table, &f.cls).unwrap();
        let logits = decode_stage(&d.0, &f.per_block[3], &m.head, &flags, 1, &m.config.decoder).unwrap();
        assert_eq!(out.stage_logits[0], logits);
        assert_eq!(out.probs, cascade_masks(&[logits]).unwrap());
    }

    #[test]
    fn stage_decoders_are_isolated() {
        let m = model("2|3|4", ModeFlags::default());
        let t = classes(3);
        let a = m.forward_full(&image(), &t).unwrap();
        let mut m2 = m.clone();
        for (name, p) in m2.head.iter_mut() {
            if name.starts_with("decoder.s1.") {
                for v in p.value.data_mut() {
                    *v += 0.1;
                }
            }
        }
        let b = m2.forward_full(&image(), &t).unwrap();
        assert_ne!(a.stage_logits[0], b.stage_logits[0]);
        assert_eq!(a.stage_logits[1], b.stage_logits[1]);
        assert_eq!(a.stage_logits[2], b.stage_logits[2]);
    }

    #[test]
    fn cascade_mask_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m1 = Tensor::randn([4, 6], 1.0, &mut rng);
        let m2 = Tensor::randn([4, 6], 1.0, &mut rng);
        let base = cascade_masks(&[m1.clone(), m2.clone()]).unwrap();
        let shifted = cascade_masks(&[m1.map(|v| v + 3.0), m2.map(|v| v + 3.0)]).unwrap();
        assert!(base.max_abs_diff(&shifted) < 1e-12);
        let cancel = cascade_masks(&[m1.clone(), m1.map(|v| -v)]).unwrap();
        assert!(cancel.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(cascade_masks(&[m1, Tensor::zeros([3, 6])]).is_err());
        assert!(cascade_masks(&[]).is_err());
    }

    #[test]
    fn every_mode_runs() {
        for aggregation in [Aggregation::Nga, Aggregation::Sum, Aggregation::Concat, Aggregation::SelfAttention] {
            for text_embedding in [TextEmbedding::Independent, TextEmbedding::Shared] {
                for fusion in [Fusion::Cascade, Fusion::Naive] {
                    let m = model("1,2|3|4", ModeFlags { aggregation, text_embedding, fusion });
                    let out = m.forward_full(&image(), &classes(2)).unwrap();
                    assert_eq!(out.stage_logits.len(), m.config.decoders());
                }
            }
        }
    }

    #[test]
    fn sum_matches_nga_at_large_sigma() {
        let nga = {
            let mut m = model("2,3|4", ModeFlags::default());
            for s in 1..=2 {
                m.head.get_mut(&format!("nga.s{s}.rho")).unwrap().value = Tensor::scalar(1e6);
            }
            m
        };
        let mut sum = nga.clone();
        sum.config.flags.aggregation = Aggregation::Sum;
        let a = nga.forward_full(&image(), &classes(3)).unwrap();
        let b = sum.forward_full(&image(), &classes(3)).unwrap();
        assert!(a.fused_logits.max_abs_diff(&b.fused_logits) < 1e-6);
    }

    #[test]
    fn rejects_out_of_range_plan() {
        let enc = Encoder::init(enc_cfg(), 1).unwrap();
        let cfg = CascadeConfig::new("3|5".parse().unwrap());
        assert!(matches!(CascadeModel::init(enc, cfg, 0), Err(Error::Config(_))));
    }
}
