//! Confusion-count metrics: per-class IoU, split means and harmonic mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::text::ClassSplit;

/// Harmonic mean of seen and unseen mIoU.
pub fn hiou(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Ground-truth × prediction pixel counts; IGNORE ground truth is skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: &[u16], truth: &[u16]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: vec![pred.len()],
                rhs: vec![truth.len()],
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p as usize >= self.classes {
                return Err(Error::invalid(format!("predicted class {p} outside 0..{}", self.classes)));
            }
            if t == IGNORE {
                continue;
            }
            if t as usize >= self.classes {
                return Err(Error::invalid(format!("label {t} outside 0..{}", self.classes)));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn add_maps(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::Geometry("prediction and label maps differ in size".into()));
        }
        self.add(&pred.labels, &truth.labels)
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("merging confusion counts over different class lists"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` for class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.count(c, c);
        let col: u64 = (0..self.classes).map(|t| self.count(t, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.count(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    pub fn report(&self, split: &ClassSplit) -> Result<MetricsReport> {
        if split.len() != self.classes {
            return Err(Error::invalid(format!(
                "split has {} classes, confusion has {}",
                split.len(),
                self.classes
            )));
        }
        let mut iou = Vec::with_capacity(self.classes);
        let mut pixels = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let (tp, fp, fne) = self.class_counts(c);
            let union = tp + fp + fne;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            pixels.push(tp + fne);
        }
        let mean = |ids: Vec<usize>| -> Option<f64> {
            if ids.iter().all(|&c| pixels[c] == 0) {
                return None;
            }
            let vals: Vec<f64> = ids.iter().filter_map(|&c| iou[c]).collect();
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let miou_seen = mean(split.seen_ids());
        let miou_unseen = mean(split.unseen_ids());
        let h = match (miou_seen, miou_unseen) {
            (Some(s), Some(u)) => Some(hiou(s, u)),
            _ => None,
        };
        Ok(MetricsReport {
            class_names: split.names.clone(),
            class_iou: iou,
            pixel_counts: pixels,
            miou_seen,
            miou_unseen,
            hiou: h,
            unseen_undefined: miou_unseen.is_none(),
        })
    }
}

/// IoU values are fractions in `[0, 1]`; a class IoU is `None` when the
/// class has an empty union, and a split mean is `None` when the split has
/// no ground-truth pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub class_iou: Vec<Option<f64>>,
    pub pixel_counts: Vec<u64>,
    pub miou_seen: Option<f64>,
    pub miou_unseen: Option<f64>,
    pub hiou: Option<f64>,
    pub unseen_undefined: bool,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for name in &self.class_names {
            let _ = write!(s, "iou_{},", name.replace([' ', ','], "_"));
        }
        s.push_str("mIoU_S,mIoU_U,hIoU\n");
        for v in &self.class_iou {
            let _ = write!(s, "{},", cell(*v));
        }
        let _ = writeln!(
            s,
            "{},{},{}",
            cell(self.miou_seen),
            cell(self.miou_unseen),
            cell(self.hiou)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split() -> ClassSplit {
        ClassSplit::new(
            vec!["bg".into(), "a".into(), "b".into(), "u".into()],
            vec![true, true, true, false],
        )
        .unwrap()
    }

    #[test]
    fn harmonic_mean() {
        assert!((hiou(0.40, 0.60) - 0.48).abs() < 1e-12);
        for x in [0.0, 0.1, 0.5, 1.0] {
            assert!((hiou(x, x) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![0u16, 1, 2, 3, 3, IGNORE];
        let mut c = Confusion::new(4);
        c.add(&[0, 1, 2, 3, 3, 1], &truth).unwrap();
        let r = c.report(&split()).unwrap();
        assert!(r.class_iou.iter().all(|v| *v == Some(1.0)));
        assert_eq!(r.hiou, Some(1.0));
    }

    #[test]
    fn undefined_unseen() {
        let mut c = Confusion::new(4);
        c.add(&[0, 1, 3], &[0, 1, IGNORE]).unwrap();
        let r = c.report(&split()).unwrap();
        assert!(r.unseen_undefined);
        assert_eq!(r.hiou, None);
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn bad_prediction_index() {
        let mut c = Confusion::new(4);
        assert!(c.add(&[4], &[0]).is_err());
    }

    #[test]
    fn csv_shape() {
        let mut c = Confusion::new(4);
        c.add(&[0, 1, 2, 3], &[0, 1, 2, 2]).unwrap();
        let csv = c.report(&split()).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "iou_bg,iou_a,iou_b,iou_u,mIoU_S,mIoU_U,hIoU");
        assert_eq!(lines[1].split(',').count(), 7);
    }

    proptest! {
        #[test]
        fn order_and_sharding_invariant(
            pairs in proptest::collection::vec((0u16..4, 0u16..5), 1..200),
            cut in 0usize..200,
        ) {
            let pred: Vec<u16> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<u16> = pairs.iter().map(|p| if p.1 == 4 { IGNORE } else { p.1 }).collect();
            let mut whole = Confusion::new(4);
            whole.add(&pred, &truth).unwrap();
            let k = cut.min(pred.len());
            let mut a = Confusion::new(4);
            a.add(&pred[k..], &truth[k..]).unwrap();
            let mut b = Confusion::new(4);
            b.add(&pred[..k], &truth[..k]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&whole, &a);
            let r = whole.report(&split()).unwrap();
            for v in r.class_iou.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            if let (Some(s), Some(u), Some(h)) = (r.miou_seen, r.miou_unseen, r.hiou) {
                prop_assert!(h <= (s + u) / 2.0 + 1e-12);
            }
        }
    }
}
