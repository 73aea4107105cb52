//! One forward pass of an untrained three-stage cascade on a benchmark
//! scene: per-stage logits, fused probabilities and the NGA variances.

use cascadeseg::data::{generate, SceneConfig};
use cascadeseg::encoder::Encoder;
use cascadeseg::text::embed_classes;
use cascadeseg::train::{argmax_columns, build_model, RunConfig};

fn main() -> cascadeseg::Result<()> {
    let cfg = RunConfig::tiny().with_overrides(&["stage_plan=6,7,8|9,10,11|12"])?;
    let scenes = SceneConfig::benchmark_with_canvas(0, cfg.image_size)?;
    let sample = &generate(&scenes, 1)?[0];
    let classes = embed_classes(&scenes.split().names, cfg.text_seed, cfg.dim, cfg.templates)?;

    let model = build_model(&cfg, Encoder::init(cfg.encoder(), 0)?)?;
    let out = model.forward_full(&sample.image, &classes)?;
    for (s, logits) in out.stage_logits.iter().enumerate() {
        println!("stage {} logits {:?}", s + 1, logits.shape());
    }
    let sigmas: Vec<String> = model.sigmas().iter().map(|s| format!("{s:.3}")).collect();
    println!("probabilities {:?}, sigmas [{}]", out.probs.shape(), sigmas.join(", "));
    println!("token predictions {:?}", argmax_columns(&out.probs));
    Ok(())
}
