use serde::{Deserialize, Serialize};

use super::scene::{LabelMap, SceneSample, IGNORE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::ClassSplit;

/// What unseen-class pixels become in the inductive view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnseenPolicy {
    #[default]
    Ignore,
    Background,
}

/// Samples plus the global class ids that take part in training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub samples: Vec<SceneSample>,
    pub classes: Vec<usize>,
}

fn relabel(sample: &SceneSample, f: impl Fn(usize, u16) -> u16) -> SceneSample {
    let labels = sample
        .label
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| f(i, l))
        .collect();
    SceneSample::with_label(
        sample.image.clone(),
        LabelMap {
            height: sample.label.height,
            width: sample.label.width,
            labels,
        },
    )
}

/// Removes unseen supervision: unseen pixels become IGNORE (or background
/// under [`UnseenPolicy::Background`]) and only seen classes train.
pub fn make_inductive_view(
    samples: &[SceneSample],
    split: &ClassSplit,
    policy: UnseenPolicy,
) -> TrainingView {
    let replacement = match policy {
        UnseenPolicy::Ignore => IGNORE,
        UnseenPolicy::Background => 0,
    };
    let samples = samples
        .iter()
        .map(|s| {
            relabel(s, |_, l| {
                if l != IGNORE && !split.is_seen(l as usize) {
                    replacement
                } else {
                    l
                }
            })
        })
        .collect();
    TrainingView {
        samples,
        classes: split.seen_ids(),
    }
}

/// Transductive relabeling from per-sample fused probabilities.
///
/// `probs[i]` is `C×N` over the full class list (global order) at token
/// resolution on a `grid×grid` layout with `patch`-pixel cells. Pixels whose
/// label is a seen class keep it. Every other pixel takes the predicted
/// class if that class is unseen and its probability is at least
/// `threshold`; otherwise it is IGNORE.
pub fn pseudo_label_from_probs(
    samples: &[SceneSample],
    probs: &[Tensor],
    split: &ClassSplit,
    threshold: f64,
    grid: usize,
    patch: usize,
) -> Result<TrainingView> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "pseudo-label threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if samples.len() != probs.len() {
        return Err(Error::invalid("one probability map per sample required"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(probs) {
        let (c, n) = p.dims2()?;
        if c != split.len() || n != grid * grid {
            return Err(Error::ShapeMismatch {
                op: "pseudo_label",
                lhs: p.shape().to_vec(),
                rhs: vec![split.len(), grid * grid],
            });
        }
        if s.label.height != grid * patch || s.label.width != grid * patch {
            return Err(Error::Geometry("label map does not match token grid".into()));
        }
        // Per-token argmax and confidence.
        let best: Vec<(usize, f64)> = (0..n)
            .map(|t| {
                (0..c)
                    .map(|k| (k, p.at(k, t)))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
            })
            .collect();
        let width = s.label.width;
        out.push(relabel(s, |i, l| {
            if l != IGNORE && split.is_seen(l as usize) {
                return l;
            }
            let (y, x) = (i / width, i % width);
            let (k, conf) = best[(y / patch) * grid + x / patch];
            if !split.is_seen(k) && conf >= threshold {
                k as u16
            } else {
                IGNORE
            }
        }));
    }
    Ok(TrainingView {
        samples: out,
        classes: (0..split.len()).collect(),
    })
}
