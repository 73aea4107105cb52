use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cascadeseg::analysis::{cka_matrix, cosine_map, matrix_csv, mean_offdiag, write_pgm, FeatureDump};
use cascadeseg::encoder::PromptBank;
use cascadeseg::gradsuite::run_suite;
use cascadeseg::nn::ParamStore;
use cascadeseg::train::{
    ablate, build_model, count_parameters, evaluate, pretrained_encoder, pseudo_label, run_transductive,
    trace_csv, train_model, Checkpoint, Experiment, Preset, RunConfig, TrainOptions,
};
use cascadeseg::{Error, Result};

#[derive(Parser)]
#[command(name = "cascadeseg", version, about = "Cascaded multi-level zero-shot segmentation on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to the benchmark preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage_plan=6,7,8|9,10,11|12`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the stand-in visual encoder and save it frozen.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts and decoders on the seen classes.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint from `pretrain`; pretrains inline if absent.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pseudo labels for the training scenes.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training on pseudo labels over all classes.
    RetrainTransductive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer similarity and cosine heatmaps.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation preset over several seeds.
    Ablate {
        #[arg(long)]
        preset: Preset,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact parameter counts per section.
    Params {
        #[arg(long)]
        trainable_only: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    /// Model or encoder-only checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of held-out scenes to encode.
    #[arg(long, default_value_t = 16)]
    images: usize,
}

#[derive(Subcommand)]
enum Analyze {
    /// CKA matrix over all blocks.
    Cka {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        /// Also save the raw per-block features here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Per-patch cosine map of one block against a class or a patch.
    Cosmap {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long)]
        block: usize,
        /// Reference class name.
        #[arg(long, conflicts_with = "patch")]
        class: Option<String>,
        /// Reference patch index.
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::benchmark(),
    };
    let cfg = base.with_overrides(&common.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn write_report(dir: &Path, report: &cascadeseg::objective::MetricsReport) -> Result<()> {
    std::fs::write(dir.join("metrics.json"), report.to_json()?)?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let exp = Experiment::prepare(cfg)?;
    let (encoder, trace) = pretrained_encoder(cfg, &exp)?;
    Checkpoint::from_encoder(&encoder, cfg, trace.len()).save(out)?;
    std::fs::write(out.join("pretrain_trace.csv"), trace_csv(&trace))?;
    print_json(&serde_json::json!({ "steps": trace.len(), "final_loss": trace.last(), "out": out }))
}

fn train(cfg: &RunConfig, out: &Path, encoder: Option<&Path>) -> Result<()> {
    let exp = Experiment::prepare(cfg)?;
    let encoder = match encoder {
        Some(dir) => Checkpoint::load(dir)?.encoder()?,
        None => pretrained_encoder(cfg, &exp)?.0,
    };
    let mut model = build_model(cfg, encoder)?;
    let view = exp.inductive_view(cfg);
    std::fs::create_dir_all(out)?;
    let outcome = match train_model(
        &mut model,
        &view,
        &exp.classes,
        &TrainOptions::from_config(cfg),
        Some((&exp.eval, &exp.split)),
    ) {
        Ok(o) => o,
        Err(e @ Error::Divergence { step, .. }) => {
            Checkpoint::from_model(&model, cfg, step).save(out.join("last-good"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    Checkpoint::from_model(&model, cfg, cfg.iterations).save(out.join("checkpoint"))?;
    std::fs::write(out.join("loss_trace.csv"), trace_csv(&outcome.trace))?;
    write_json(out.join("evals.json"), &outcome.evals)?;
    let report = evaluate(&model, &exp.eval, &exp.split, &exp.classes)?;
    write_report(out, &report)?;
    print_json(&report)
}

/// Loads a model checkpoint; `--set` overrides apply on top of its config.
fn load_model(dir: &Path, common: &Common) -> Result<(RunConfig, cascadeseg::cascade::CascadeModel)> {
    let ck = Checkpoint::load(dir)?;
    let cfg = ck.config.with_overrides(&common.set)?;
    let model = ck.to_model(Some(&cfg.stage_plan))?;
    Ok((cfg, model))
}

fn eval(common: &Common, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, model) = load_model(checkpoint, common)?;
    let exp = Experiment::prepare(&cfg)?;
    let report = evaluate(&model, &exp.eval, &exp.split, &exp.classes)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_report(dir, &report)?;
    }
    print_json(&report)
}

fn pseudo(common: &Common, checkpoint: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = load_model(checkpoint, common)?;
    let exp = Experiment::prepare(&cfg)?;
    let view = pseudo_label(&model, &exp, &cfg)?;
    std::fs::create_dir_all(out)?;
    let mut counts = vec![0usize; exp.split.len()];
    let mut ignored = 0usize;
    for (i, s) in view.samples.iter().enumerate() {
        for &l in &s.label.labels {
            match counts.get_mut(l as usize) {
                Some(c) => *c += 1,
                None => ignored += 1,
            }
        }
        cascadeseg::numerics::io::save_tensor(out.join(format!("label_{i:05}.tensor")), &s.label.to_tensor())?;
    }
    let summary = serde_json::json!({
        "threshold": cfg.pseudo_threshold,
        "samples": view.samples.len(),
        "class_names": exp.split.names,
        "pixel_counts": counts,
        "ignored_pixels": ignored,
    });
    write_json(out.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn retrain(common: &Common, checkpoint: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = load_model(checkpoint, common)?;
    let exp = Experiment::prepare(&cfg)?;
    let start = Checkpoint::load(checkpoint)?.iteration;
    let run = run_transductive(&cfg, &exp, model)?;
    std::fs::create_dir_all(out)?;
    Checkpoint::from_model(&run.model, &cfg, start + cfg.retrain_iterations).save(out.join("checkpoint"))?;
    std::fs::write(out.join("loss_trace.csv"), trace_csv(&run.outcome.trace))?;
    write_json(out.join("evals.json"), &run.outcome.evals)?;
    write_report(out, &run.report)?;
    print_json(&run.report)
}

fn feature_dump(common: &Common, source: &Source) -> Result<FeatureDump> {
    let ck = Checkpoint::load(&source.checkpoint)?;
    let cfg = ck.config.with_overrides(&common.set)?;
    let exp = Experiment::prepare(&cfg)?;
    let (encoder, prompts) = if ck.has_head() {
        let m = ck.to_model(None)?;
        (m.encoder, m.prompts)
    } else {
        let mut e = ck.encoder()?;
        e.config.prompt_len = 0;
        (e, PromptBank::empty())
    };
    let n = source.images.min(exp.eval.len());
    let images: Vec<(usize, &cascadeseg::numerics::Tensor)> = exp.eval[..n].iter().enumerate().map(|(i, s)| (i, &s.image)).collect();
    FeatureDump::from_encoder(&encoder, &prompts, &images, Some(&exp.classes))
}

fn analyze(common: &Common, what: &Analyze) -> Result<()> {
    match what {
        Analyze::Cka { source, out, dump } => {
            let d = feature_dump(common, source)?;
            if let Some(dir) = dump {
                d.save(dir)?;
            }
            let m = cka_matrix(&d)?;
            std::fs::write(out, matrix_csv(&m, &d.layers)?)?;
            let deep: Vec<usize> = d.layers.iter().copied().filter(|&l| l >= 6).collect();
            let summary = serde_json::json!({
                "blocks": d.layers,
                "images": d.image_ids.len(),
                "mean_offdiag_all": mean_offdiag(&m, &d.layers, &d.layers)?,
                "mean_offdiag_from_block6": mean_offdiag(&m, &d.layers, &deep).ok(),
                "out": out,
            });
            print_json(&summary)
        }
        Analyze::Cosmap {
            source,
            image,
            block,
            class,
            patch,
            scale,
            out,
        } => {
            let d = feature_dump(common, &Source {
                checkpoint: source.checkpoint.clone(),
                images: image + 1,
            })?;
            let layer = d
                .layers
                .iter()
                .position(|l| l == block)
                .ok_or_else(|| Error::invalid(format!("block {block} not in encoder")))?;
            let h = d
                .features
                .get(layer)
                .and_then(|f| f.get(*image))
                .ok_or_else(|| Error::invalid(format!("image {image} not available")))?;
            let reference: Vec<f64> = match (class, patch) {
                (Some(name), None) => {
                    let row = d
                        .class_names
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| Error::invalid(format!("unknown class {name:?}")))?;
                    let table = d.class_table.as_ref().ok_or_else(|| Error::invalid("no class table"))?;
                    table.row(row).to_vec()
                }
                (None, Some(p)) if *p < h.rows() => h.row(*p).to_vec(),
                (None, Some(p)) => return Err(Error::invalid(format!("patch {p} out of range"))),
                _ => return Err(Error::invalid("give exactly one of --class or --patch")),
            };
            let map = cosine_map(h, &reference)?;
            write_pgm(out, &map.values, d.grid, -1.0, 1.0, *scale)?;
            print_json(&serde_json::json!({ "grid": d.grid, "values": map.values, "zero_rows": map.zero_rows, "out": out }))
        }
    }
}

fn params(cfg: &RunConfig, checkpoint: Option<&Path>, trainable_only: bool) -> Result<()> {
    let store: ParamStore = match checkpoint {
        Some(dir) => Checkpoint::load(dir)?.params,
        None => {
            let encoder = cascadeseg::encoder::Encoder::init(cfg.encoder(), 0)?;
            Checkpoint::from_model(&build_model(cfg, encoder)?, cfg, 0).params
        }
    };
    print_json(&count_parameters(&store, trainable_only))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Pretrain { out } => pretrain(&config(common)?, out),
        Command::Train { out, encoder } => train(&config(common)?, out, encoder.as_deref()),
        Command::Eval { checkpoint, out } => eval(common, checkpoint, out.as_deref()),
        Command::PseudoLabel { checkpoint, out } => pseudo(common, checkpoint, out),
        Command::RetrainTransductive { checkpoint, out } => retrain(common, checkpoint, out),
        Command::Analyze { what } => analyze(common, what),
        Command::Gradcheck { cases, seed, out } => {
            let report = run_suite(*cases, *seed)?;
            if let Some(path) = out {
                write_json(path, &report)?;
            }
            print_json(&report)?;
            if !report.passed {
                let failed: Vec<&str> = report
                    .entries
                    .iter()
                    .filter(|e| e.passed < e.cases)
                    .map(|e| e.name.as_str())
                    .collect();
                return Err(Error::Undefined(format!("gradient check failed for {}", failed.join(", "))));
            }
            Ok(())
        }
        Command::Ablate { preset, seeds, out } => {
            let report = ablate(*preset, &config(common)?, seeds)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("ablation.csv"), report.to_csv())?;
            write_json(out.join("ablation.json"), &report)?;
            emit(&report.to_csv())
        }
        Command::Params {
            trainable_only,
            checkpoint,
        } => params(&config(common)?, checkpoint.as_deref(), *trainable_only),
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return match emit(&e.render().to_string()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(_) => ExitCode::FAILURE,
            };
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let r = e.report();
            fail(r.error, r.message)
        }
    }
}
