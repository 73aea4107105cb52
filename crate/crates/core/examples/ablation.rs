//! A short aggregation ablation on one seed; prints the summary CSV.
//!
//! The preset name may be given as the first argument, e.g.
//! `cargo run --release --example ablation -- sigma_sweep`.

use cascadeseg::train::{ablate, Preset, RunConfig};

fn main() -> cascadeseg::Result<()> {
    let preset: Preset = std::env::args().nth(1).as_deref().unwrap_or("aggregation").parse()?;
    let cfg = RunConfig {
        iterations: 150,
        pretrain_steps: 300,
        ..RunConfig::benchmark()
    };
    let report = ablate(preset, &cfg, &[0])?;
    print!("{}", report.to_csv());
    Ok(())
}
