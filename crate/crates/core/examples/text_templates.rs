//! Prompt expansion, class embeddings and the relationship descriptor.

use cascadeseg::numerics::Tensor;
use cascadeseg::text::{embed_classes, expand_templates, relationship_descriptor, TemplateMode};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> cascadeseg::Result<()> {
    for s in expand_templates("red checker", TemplateMode::Augmented)? {
        println!("  {s}");
    }

    let names: Vec<String> = ["red disk", "red checker", "blue stripes"].iter().map(|s| s.to_string()).collect();
    let table = embed_classes(&names, 0, 32, TemplateMode::Augmented)?;
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let c = cosine(table.table.row(i), table.table.row(j));
            println!("cos({}, {}) = {c:+.3}", names[i], names[j]);
        }
    }

    let g = Tensor::full([1, 32], 0.5);
    let d = relationship_descriptor(&table.table, &g)?;
    println!("descriptor shape {:?}", d.0.shape());
    Ok(())
}
