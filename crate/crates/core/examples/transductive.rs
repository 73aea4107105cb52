//! Pseudo-labels unseen pixels with an inductively trained model and
//! retrains on them, at the full benchmark schedule (about two minutes).

use cascadeseg::data::IGNORE;
use cascadeseg::train::{pretrained_encoder, pseudo_label, run_inductive, run_transductive, Experiment, RunConfig};

fn main() -> cascadeseg::Result<()> {
    let cfg = RunConfig::benchmark();
    let exp = Experiment::prepare(&cfg)?;
    let (encoder, _) = pretrained_encoder(&cfg, &exp)?;
    let inductive = run_inductive(&cfg, &exp, encoder)?;

    let view = pseudo_label(&inductive.model, &exp, &cfg)?;
    let unseen = exp.split.unseen_ids();
    let labeled = view
        .samples
        .iter()
        .flat_map(|s| s.label.labels.iter())
        .filter(|&&l| l != IGNORE && unseen.contains(&(l as usize)))
        .count();
    println!("{labeled} pixels pseudo-labeled as unseen classes");

    let retrained = run_transductive(&cfg, &exp, inductive.model)?;
    let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
    println!(
        "mIoU seen {} -> {}, unseen {} -> {}",
        pct(inductive.report.miou_seen),
        pct(retrained.report.miou_seen),
        pct(inductive.report.miou_unseen),
        pct(retrained.report.miou_unseen)
    );
    Ok(())
}
