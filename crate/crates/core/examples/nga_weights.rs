//! Neighborhood Gaussian weights for a few stage depths and variances, and
//! the aggregate of three toy block features.

use cascadeseg::cascade::{nga_aggregate, nga_weights};
use cascadeseg::numerics::Tensor;

fn main() -> cascadeseg::Result<()> {
    for sigma in [0.5, 1.0, 2.0, 8.0] {
        let w = nga_weights(4, sigma)?;
        let shown: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
        println!("d=4 sigma={sigma:<4} weights [{}]", shown.join(", "));
    }

    let blocks: Vec<Tensor> = (1..=3).map(|l| Tensor::full([2, 3], l as f64)).collect();
    let z = nga_aggregate(&blocks, 1.0)?;
    println!("aggregate of constant blocks 1, 2, 3 at sigma=1: {:.4}", z.at(0, 0));
    Ok(())
}
