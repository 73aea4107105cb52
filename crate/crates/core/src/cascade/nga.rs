//! Neighborhood Gaussian aggregation.
//!
//! For a stage of `d` blocks, block `l` (1-based within the stage) gets
//! weight `exp(-(d - l + 1)^2 / (2 σ^2))` and the stage feature is the
//! unnormalized weighted sum.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Inverse of softplus, for initializing `ρ` from a target `σ`.
pub fn softplus_inv(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma
    } else {
        sigma.exp_m1().ln()
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn nga_weights(d: usize, sigma: f64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("aggregation over zero blocks"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("σ must be positive, got {sigma}")));
    }
    Ok((1..=d)
        .map(|l| {
            let k = (d - l + 1) as f64;
            (-0.5 * k * k / (sigma * sigma)).exp()
        })
        .collect())
}

pub fn nga_aggregate(blocks: &[Tensor], sigma: f64) -> Result<Tensor> {
    let w = nga_weights(blocks.len(), sigma)?;
    let shape = blocks[0].shape().to_vec();
    let mut out = vec![0.0; blocks[0].numel()];
    for (h, w) in blocks.iter().zip(w) {
        if h.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "nga_aggregate",
                lhs: shape,
                rhs: h.shape().to_vec(),
            });
        }
        for (o, v) in out.iter_mut().zip(h.data()) {
            *o += v * w;
        }
    }
    Tensor::new(shape, out)
}

/// Recorded aggregation with `σ = softplus(rho)`; `rho` has one element.
pub fn nga_aggregate_var<'t>(blocks: &[Var<'t>], rho: Var<'t>) -> Result<Var<'t>> {
    if blocks.is_empty() {
        return Err(Error::invalid("aggregation over zero blocks"));
    }
    let d = blocks.len();
    let inv_var = rho.softplus()?.powf(-2.0)?;
    let mut z: Option<Var<'t>> = None;
    for (i, &h) in blocks.iter().enumerate() {
        let k = (d - i) as f64;
        let w = inv_var.scale(-0.5 * k * k)?.exp()?;
        let term = h.mul(w)?;
        z = Some(match z {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(z.expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn three_blocks_unit_sigma() {
        let w = nga_weights(3, 1.0).unwrap();
        let expect = [0.011109, 0.135335, 0.606531];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(w[0], (-4.5f64).exp());
        assert_eq!(w[2], (-0.5f64).exp());
    }

    #[test]
    fn single_block_and_wide_sigma() {
        let h = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let z = nga_aggregate(std::slice::from_ref(&h), 1.0).unwrap();
        assert!(z.max_abs_diff(&h.map(|v| v * (-0.5f64).exp())) < 1e-15);
        assert!(((-0.5f64).exp() - 0.606531).abs() < 1e-6);
        let w = nga_weights(4, 1e6).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(nga_weights(0, 1.0).is_err());
        assert!(nga_weights(2, 0.0).is_err());
        assert!(nga_weights(2, -1.0).is_err());
    }

    #[test]
    fn recorded_matches_closed_form() {
        let tape = Tape::new();
        let hs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::matrix(1, 2, vec![i as f64 + 1.0, -(i as f64)]).unwrap())
            .collect();
        let vars: Vec<_> = hs.iter().map(|h| tape.constant(h.clone())).collect();
        let rho = tape.leaf(Tensor::scalar(softplus_inv(2.0)));
        let z = nga_aggregate_var(&vars, rho).unwrap();
        let direct = nga_aggregate(&hs, 2.0).unwrap();
        assert!(z.value().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn softplus_inverse() {
        for s in [0.5, 1.0, 2.0, 4.0, 50.0] {
            assert!((softplus(softplus_inv(s)) - s).abs() < 1e-12);
        }
    }
}
