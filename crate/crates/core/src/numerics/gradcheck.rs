//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Configuration for [`GradCheck::run`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates per input, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} (abs {:.3e}) vs tol {:.1e}: {}",
            self.coords_checked,
            self.max_rel_error,
            self.max_abs_error,
            self.tol,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheck {
            step,
            tol,
            ..Default::default()
        }
    }

    pub fn with_max_coords(mut self, n: usize, seed: u64) -> Self {
        self.max_coords = Some(n);
        self.seed = seed;
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    /// Compares the tape gradient of `f` against central differences
    /// `(f(x+h·e) − f(x−h·e)) / 2h` coordinate by coordinate.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<CheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        if !(self.step > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        let analytic = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&tape, &vars)?;
            super::grad(out, &vars)?
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = CheckReport {
            coords_checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            tol: self.tol,
            passed: true,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (input, grad) in analytic.iter().enumerate() {
            let n = inputs[input].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => {
                    let mut c = sample(&mut rng, n, m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for index in coords {
                let orig = inputs[input].data()[index];
                let wrap = |e: Error| Error::GradCheckEval {
                    input,
                    index,
                    source: Box::new(e),
                };
                work[input].data_mut()[index] = orig + self.step;
                let plus = eval(&f, &work).map_err(wrap)?;
                work[input].data_mut()[index] = orig - self.step;
                let minus = eval(&f, &work).map_err(wrap)?;
                work[input].data_mut()[index] = orig;

                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[index];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
                report.coords_checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((input, index));
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = numeric;
                }
            }
        }
        report.passed = report.max_rel_error <= self.tol;
        Ok(report)
    }
}

/// Checks every coordinate of every input with the default floor.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    GradCheck::new(step, tol).run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
        let r = finite_diff_check(|_, v| v[0].square()?.sum(), &[x], 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let r = finite_diff_check(
            |_, v| v[0].grad_scale(1.01)?.sigmoid()?.sum(),
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed, "{r}");
    }

    #[test]
    fn evaluation_error_reports_coordinate() {
        // log is fine at the point but not after the positive step below zero.
        let x = Tensor::vector(vec![1.0, 5e-6]).unwrap();
        let err = finite_diff_check(|_, v| v[0].log()?.sum(), &[x], 1e-5, 1e-4).unwrap_err();
        match err {
            Error::GradCheckEval { input, index, .. } => assert_eq!((input, index), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|_, v| v[0].sum(), &[x], 0.0, 1e-4).is_err());
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::zeros([10, 10]);
        let r = GradCheck::new(1e-5, 1e-4)
            .with_max_coords(7, 1)
            .run(|_, v| v[0].exp()?.sum(), &[x])
            .unwrap();
        assert_eq!(r.coords_checked, 7);
        assert!(r.passed);
    }
}
