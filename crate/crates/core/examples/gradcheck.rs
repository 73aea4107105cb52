//! Finite-difference checks: one hand-written function, then a short run
//! of the full primitive and composite suite.

use cascadeseg::gradsuite::run_suite;
use cascadeseg::numerics::{finite_diff_check, Tensor};

fn main() -> cascadeseg::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4])?;
    let report = finite_diff_check(|_, v| v[0].sigmoid()?.mul(v[0])?.softmax(0)?.log()?.mean(), &[x], 1e-5, 1e-4)?;
    println!("log(softmax(x·σ(x))): {report}");

    let suite = run_suite(5, 0)?;
    for e in &suite.entries {
        println!("{:<20} {}/{} worst rel {:.1e}", e.name, e.passed, e.cases, e.worst_rel_error);
    }
    println!("all passed: {}", suite.passed);
    Ok(())
}
