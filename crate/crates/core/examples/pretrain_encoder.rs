//! Pretrains the stand-in encoder briefly on seen classes and saves it as
//! an encoder-only checkpoint.

use cascadeseg::train::{pretrained_encoder, Checkpoint, Experiment, RunConfig};

fn main() -> cascadeseg::Result<()> {
    let cfg = RunConfig {
        pretrain_steps: 60,
        ..RunConfig::tiny()
    };
    let exp = Experiment::prepare(&cfg)?;
    let (encoder, trace) = pretrained_encoder(&cfg, &exp)?;
    for (i, l) in trace.iter().enumerate().step_by(10) {
        println!("step {i:>3} loss {l:.4}");
    }
    let dir = std::env::temp_dir().join("cascadeseg-encoder-example");
    Checkpoint::from_encoder(&encoder, &cfg, 0).save(&dir)?;
    let back = Checkpoint::load(&dir)?.encoder()?;
    println!("saved to {}, frozen {}", dir.display(), back.is_frozen());
    Ok(())
}
