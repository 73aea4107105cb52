//! Generates benchmark scenes, prints one label map as text and writes a
//! small corpus to a temporary directory.

use cascadeseg::data::{generate, load_corpus, save_corpus, SceneConfig};

fn main() -> cascadeseg::Result<()> {
    let cfg = SceneConfig::benchmark_with_canvas(7, 32)?;
    let split = cfg.split();
    for (i, name) in split.names.iter().enumerate() {
        let tag = if split.is_seen(i) { "seen" } else { "unseen" };
        println!("{i:>2} {name:<16} {tag}");
    }

    let samples = generate(&cfg, 8)?;
    let first = &samples[0];
    println!("\nscene 0, classes present {:?}", first.present);
    for y in (0..first.label.height).step_by(2) {
        let row: String = (0..first.label.width)
            .step_by(2)
            .map(|x| match first.label.get(y, x) {
                0 => '.',
                c => char::from_digit(c as u32 % 36, 36).unwrap_or('?'),
            })
            .collect();
        println!("{row}");
    }

    let dir = std::env::temp_dir().join("cascadeseg-corpus-example");
    save_corpus(&dir, &cfg, &samples)?;
    let (manifest, back) = load_corpus(&dir)?;
    println!("\nsaved and reloaded {} scenes, {} classes, to {}", back.len(), manifest.split.len(), dir.display());
    Ok(())
}
