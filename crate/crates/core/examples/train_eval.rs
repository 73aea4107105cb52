//! Inductive training on seen classes, then evaluation on seen and unseen.
//!
//! Pass `--benchmark` for the full desk-scale schedule (about two
//! minutes); the default shortens pretraining and training.

use cascadeseg::train::{pretrained_encoder, run_inductive, Experiment, RunConfig};

fn main() -> cascadeseg::Result<()> {
    let cfg = if std::env::args().any(|a| a == "--benchmark") {
        RunConfig::benchmark()
    } else {
        RunConfig {
            iterations: 200,
            eval_every: 50,
            pretrain_steps: 300,
            ..RunConfig::benchmark()
        }
    };
    let exp = Experiment::prepare(&cfg)?;
    let (encoder, _) = pretrained_encoder(&cfg, &exp)?;
    let run = run_inductive(&cfg, &exp, encoder)?;
    for p in &run.outcome.evals {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
        println!("iteration {:>4}: mIoU seen {} unseen {}", p.iteration, pct(p.report.miou_seen), pct(p.report.miou_unseen));
    }
    print!("{}", run.report.to_csv());
    Ok(())
}
