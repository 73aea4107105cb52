//! Dice and focal losses on per-class sigmoid logits, with IGNORE masking.

use serde::{Deserialize, Serialize};

use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Dice weight.
    pub alpha: f64,
    /// Focal weight.
    pub beta: f64,
    pub gamma: f64,
    /// Positive-class balance; `None` weights both targets equally.
    pub focal_alpha: Option<f64>,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 100.0,
            gamma: 2.0,
            focal_alpha: Some(0.25),
            dice_eps: 1.0,
        }
    }
}

/// One-hot targets and a keep mask for `C×N` logits.
///
/// `labels[n]` is a class row in `0..C` or [`IGNORE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub onehot: Tensor,
    /// `1×N`, 1 where the label is not IGNORE.
    pub mask: Tensor,
    pub kept: usize,
}

impl Targets {
    pub fn new(labels: &[u16], classes: usize) -> Result<Self> {
        let n = labels.len();
        let mut onehot = vec![0.0; classes * n];
        let mut mask = vec![0.0; n];
        let mut kept = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let l = l as usize;
            if l >= classes {
                return Err(Error::invalid(format!(
                    "label {l} outside 0..{classes}"
                )));
            }
            onehot[l * n + i] = 1.0;
            mask[i] = 1.0;
            kept += 1;
        }
        if kept == 0 {
            return Err(Error::invalid("every pixel is IGNORE"));
        }
        Ok(Targets {
            onehot: Tensor::matrix(classes, n, onehot)?,
            mask: Tensor::matrix(1, n, mask)?,
            kept,
        })
    }

    fn check(&self, logits: &Var<'_>) -> Result<()> {
        if logits.shape() != self.onehot.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss",
                lhs: logits.shape(),
                rhs: self.onehot.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// `1 − (2Σp·y + ε)/(Σp + Σy + ε)` per class, averaged over classes.
pub fn dice_loss<'t>(tape: &'t Tape, targets: &Targets, logits: Var<'t>, eps: f64) -> Result<Var<'t>> {
    targets.check(&logits)?;
    let y = tape.constant(targets.onehot.clone());
    let mask = tape.constant(targets.mask.clone());
    let p = logits.sigmoid()?.mul(mask)?;
    let inter = p.mul(y)?.sum_axis(1)?;
    let sy = tape.constant(sum_rows(&targets.onehot));
    let denom = p.sum_axis(1)?.add(sy)?.add_scalar(eps)?;
    let ratio = inter.scale(2.0)?.add_scalar(eps)?.div(denom)?;
    ratio.neg()?.add_scalar(1.0)?.mean()
}

fn sum_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    Tensor::from_parts(vec![r, 1], (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect())
}

/// Binary focal loss per class and kept pixel, averaged.
pub fn focal_loss<'t>(
    tape: &'t Tape,
    targets: &Targets,
    logits: Var<'t>,
    gamma: f64,
    alpha: Option<f64>,
) -> Result<Var<'t>> {
    targets.check(&logits)?;
    if gamma < 0.0 {
        return Err(Error::invalid(format!("focal γ must be nonnegative, got {gamma}")));
    }
    let y = &targets.onehot;
    let sign = tape.constant(y.map(|v| 2.0 * v - 1.0));
    let z = logits.mul(sign)?;
    let mut term = z.log_sigmoid()?;
    if gamma != 0.0 {
        term = term.mul(z.neg()?.sigmoid()?.powf(gamma)?)?;
    }
    if let Some(a) = alpha {
        term = term.mul(tape.constant(y.map(|v| if v > 0.5 { a } else { 1.0 - a })))?;
    }
    let masked = term.mul(tape.constant(targets.mask.clone()))?;
    masked.sum()?.scale(-1.0 / (targets.kept * y.rows()) as f64)
}

/// `α·dice + β·focal` on the pre-softmax cascaded logits.
pub fn pixel_loss<'t>(tape: &'t Tape, targets: &Targets, logits: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    let dice = dice_loss(tape, targets, logits, cfg.dice_eps)?;
    let focal = focal_loss(tape, targets, logits, cfg.gamma, cfg.focal_alpha)?;
    dice.scale(cfg.alpha)?.add(focal.scale(cfg.beta)?)
}
