//! Ablation presets: a matrix of config cells run over a shared seed set.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::config::RunConfig;
use super::trainer::{pretrained_encoder, run_inductive, Experiment};
use crate::cascade::{Aggregation, Fusion, StagePlan, TextEmbedding};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::objective::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Decoders123,
    SplitPlans,
    Aggregation,
    SharedVsIndependent,
    SigmaSweep,
    TokenSweep,
    LossWeights,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Decoders123,
        Preset::SplitPlans,
        Preset::Aggregation,
        Preset::SharedVsIndependent,
        Preset::SigmaSweep,
        Preset::TokenSweep,
        Preset::LossWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Decoders123 => "decoders_1_2_3",
            Preset::SplitPlans => "split_plans",
            Preset::Aggregation => "aggregation",
            Preset::SharedVsIndependent => "shared_vs_independent",
            Preset::SigmaSweep => "sigma_sweep",
            Preset::TokenSweep => "token_sweep",
            Preset::LossWeights => "loss_weights",
        }
    }

    /// Named config variants derived from `base`.
    pub fn cells(self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        let b = base.blocks;
        let plan = |s: &str| -> Result<StagePlan> {
            let p: StagePlan = s.parse()?;
            p.validate(b)?;
            Ok(p)
        };
        let deep = StagePlan::default_for(b)?;
        let stages = &deep.stages;
        let fmt_stage = |s: &[usize]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let (s1, s2, s3) = (fmt_stage(&stages[0]), fmt_stage(&stages[1]), fmt_stage(&stages[2]));
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let baseline = with(&|c| {
            c.stage_plan = StagePlan::last_only(b);
            c.aggregation = Aggregation::Sum;
            c.fusion = Fusion::Cascade;
        });
        Ok(match self {
            Preset::Decoders123 => {
                let two = plan(&format!("{s2}|{s3}"))?;
                vec![
                    ("1_decoder".into(), baseline),
                    ("2_decoders".into(), with(&|c| c.stage_plan = two.clone())),
                    ("3_decoders".into(), with(&|c| c.stage_plan = deep.clone())),
                ]
            }
            Preset::SplitPlans => {
                let mut cells = vec![(format!("[{s3}]"), baseline)];
                for p in [format!("{s2}|{s3}"), format!("{s1}|{s3}"), format!("{s1}|{s2}"), deep.to_string()] {
                    let p = plan(&p)?;
                    cells.push((format!("[{p}]"), with(&|c| c.stage_plan = p.clone())));
                }
                cells
            }
            Preset::Aggregation => {
                let mut cells: Vec<(String, RunConfig)> = [
                    Aggregation::Nga,
                    Aggregation::Sum,
                    Aggregation::Concat,
                    Aggregation::SelfAttention,
                ]
                .into_iter()
                .map(|a| (a.to_string(), with(&|c| c.aggregation = a)))
                .collect();
                cells.push(("naive-fusion".into(), with(&|c| c.fusion = Fusion::Naive)));
                cells
            }
            Preset::SharedVsIndependent => [TextEmbedding::Independent, TextEmbedding::Shared]
                .into_iter()
                .map(|t| (t.to_string(), with(&|c| c.text_embedding = t)))
                .collect(),
            Preset::SigmaSweep => [0.5, 1.0, 2.0, 4.0]
                .into_iter()
                .map(|s| (format!("sigma={s}"), with(&|c| c.sigma_init = s)))
                .collect(),
            Preset::TokenSweep => [0usize, 2, 4, 8]
                .into_iter()
                .map(|p| (format!("tokens={p}"), with(&|c| c.prompt_len = p)))
                .collect(),
            Preset::LossWeights => [(1.0, 1.0), (1.0, 20.0), (1.0, 100.0), (1.0, 200.0)]
                .into_iter()
                .map(|(a, w)| {
                    (format!("alpha={a},beta={w}"), with(&|c| {
                        c.loss_alpha = a;
                        c.loss_beta = w;
                    }))
                })
                .collect(),
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt(), n }
    }

    /// Root mean of the two variances.
    pub fn pooled_std(a: &Stat, b: &Stat) -> f64 {
        ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub name: String,
    pub seen: Stat,
    pub unseen: Stat,
    pub hiou: Stat,
    pub reports: Vec<MetricsReport>,
    pub errors: Vec<String>,
}

impl CellSummary {
    pub fn from_reports(name: String, reports: Vec<MetricsReport>, errors: Vec<String>) -> Self {
        let pick = |f: fn(&MetricsReport) -> Option<f64>| {
            Stat::of(&reports.iter().filter_map(f).map(|v| 100.0 * v).collect::<Vec<_>>())
        };
        CellSummary {
            name,
            seen: pick(|r| r.miou_seen),
            unseen: pick(|r| r.miou_unseen),
            hiou: pick(|r| r.hiou),
            reports,
            errors,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
}

impl AblationReport {
    /// One row per cell; IoU columns on the 0–100 scale.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "cell,runs,failures,mIoU_S_mean,mIoU_S_std,mIoU_U_mean,mIoU_U_std,hIoU_mean,hIoU_std\n",
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                c.name.replace(',', ";"),
                c.reports.len(),
                c.errors.len(),
                c.seen.mean,
                c.seen.std,
                c.unseen.mean,
                c.unseen.std,
                c.hiou.mean,
                c.hiou.std
            ));
        }
        s
    }
}

/// Caches pretrained encoders; pretraining ignores the prompt count and
/// the head, so cells differing only there share a backbone.
#[derive(Default)]
pub struct EncoderCache {
    entries: HashMap<String, Encoder>,
}

impl EncoderCache {
    fn key(config: &RunConfig) -> String {
        let mut enc = config.encoder();
        enc.prompt_len = 0;
        format!(
            "{enc:?}|{}|{}|{}|{}|{}|{:?}|{:?}|{}|{}|{}",
            config.encoder_seed,
            config.pretrain_steps,
            config.pretrain_batch,
            config.pretrain_lr,
            config.text_seed,
            config.templates,
            config.corpus,
            config.scene_seed,
            config.train_count,
            config.eval_count
        )
    }

    pub fn get(&mut self, config: &RunConfig, exp: &Experiment) -> Result<Encoder> {
        let key = Self::key(config);
        if let Some(e) = self.entries.get(&key) {
            return Ok(e.clone());
        }
        let (enc, _) = pretrained_encoder(config, exp)?;
        self.entries.insert(key, enc.clone());
        Ok(enc)
    }
}

/// Runs every cell of `preset` once per seed. Failures are recorded per
/// cell and do not stop the matrix.
pub fn ablate(preset: Preset, base: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    let exp = Experiment::prepare(base)?;
    let mut cache = EncoderCache::default();
    let mut cells = Vec::new();
    for (name, cfg) in preset.cells(base)? {
        let mut reports = Vec::new();
        let mut errors = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let result = cache.get(&cfg, &exp).and_then(|enc| run_inductive(&cfg, &exp, enc));
            match result {
                Ok(r) => reports.push(r.report),
                Err(e) => errors.push(format!("seed {seed}: {e}")),
            }
        }
        cells.push(CellSummary::from_reports(name, reports, errors));
    }
    Ok(AblationReport {
        preset: preset.name().to_string(),
        seeds: seeds.to_vec(),
        cells,
    })
}
