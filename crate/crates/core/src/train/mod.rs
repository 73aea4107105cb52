//! Configuration, optimization, checkpoints and ablation batches.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use ablate::{ablate, AblationReport, CellSummary, Preset, Stat};
pub use checkpoint::{count_parameters, Checkpoint, Manifest, ParamCounts};
pub use config::RunConfig;
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{
    argmax_columns, build_model, evaluate, predict_tokens, pretrained_encoder, pseudo_label, run_inductive,
    run_transductive, save_benchmark_corpus, trace_csv, train_model, EvalPoint, Experiment, RunResult,
    TrainOptions, TrainOutcome,
};
