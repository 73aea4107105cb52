//! Block-to-block CKA of an encoder and a cosine-similarity heatmap of one
//! block against a class embedding.

use cascadeseg::analysis::{cka_matrix, cosine_map, matrix_csv, mean_offdiag, write_pgm, FeatureDump};
use cascadeseg::encoder::PromptBank;
use cascadeseg::train::{pretrained_encoder, Experiment, RunConfig};

fn main() -> cascadeseg::Result<()> {
    let cfg = RunConfig {
        pretrain_steps: 300,
        ..RunConfig::benchmark()
    };
    let exp = Experiment::prepare(&cfg)?;
    let (mut encoder, _) = pretrained_encoder(&cfg, &exp)?;
    encoder.config.prompt_len = 0;
    let images: Vec<_> = exp.eval.iter().take(16).enumerate().map(|(i, s)| (i, &s.image)).collect();
    let dump = FeatureDump::from_encoder(&encoder, &PromptBank::empty(), &images, Some(&exp.classes))?;

    let m = cka_matrix(&dump)?;
    print!("{}", matrix_csv(&m, &dump.layers)?);
    let late: Vec<usize> = (6..=cfg.blocks).collect();
    println!("mean CKA among blocks 6..{}: {:.4}", cfg.blocks, mean_offdiag(&m, &dump.layers, &late)?);

    let class = exp.split.names.iter().position(|n| n == "red disk").unwrap_or(1);
    let map = cosine_map(&dump.features[cfg.blocks - 1][0], exp.classes.table.row(class))?;
    let path = std::env::temp_dir().join("cascadeseg-cosmap.pgm");
    write_pgm(&path, &map.values, dump.grid, -1.0, 1.0, 8)?;
    println!("cosine map against {:?} written to {}", exp.split.names[class], path.display());
    Ok(())
}
