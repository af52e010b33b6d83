//! Segmentation metrics: per-class intersection-over-union and its mean.
//!
//! Convention: per-class intersections and unions accumulate over the whole
//! evaluation set before dividing (dataset-level IoU); the mean runs over
//! classes present in the ground truth. Classes absent from both ground
//! truth and prediction have no defined IoU and are excluded.

use crate::error::{EngineError, Result};

/// IoU of class `k` between two index maps. `None` when the class appears in
/// neither map (undefined marker).
pub fn iou(pred: &[u8], gt: &[u8], k: u8) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(EngineError::ShapeMismatch {
            expected: format!("{}", gt.len()),
            got: format!("{}", pred.len()),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let pp = p == k;
        let gg = g == k;
        inter += (pp && gg) as u64;
        union += (pp || gg) as u64;
    }
    Ok(if union == 0 {
        None
    } else {
        Some(inter as f64 / union as f64)
    })
}

/// Accumulates intersections/unions across an evaluation set.
#[derive(Debug, Clone)]
pub struct IouAccum {
    pub classes: usize,
    inter: Vec<u64>,
    union: Vec<u64>,
    gt_seen: Vec<bool>,
    any: bool,
}

impl IouAccum {
    pub fn new(classes: usize) -> Self {
        IouAccum {
            classes,
            inter: vec![0; classes],
            union: vec![0; classes],
            gt_seen: vec![false; classes],
            any: false,
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(EngineError::ShapeMismatch {
                expected: format!("{}", gt.len()),
                got: format!("{}", pred.len()),
            });
        }
        self.any = true;
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if g < self.classes {
                self.gt_seen[g] = true;
            }
            if p == g {
                if p < self.classes {
                    self.inter[p] += 1;
                    self.union[p] += 1;
                }
            } else {
                if p < self.classes {
                    self.union[p] += 1;
                }
                if g < self.classes {
                    self.union[g] += 1;
                }
            }
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                if self.union[k] == 0 {
                    None
                } else {
                    Some(self.inter[k] as f64 / self.union[k] as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        if !self.any {
            return Err(EngineError::EmptyTensor(
                "miou over empty evaluation set".into(),
            ));
        }
        let per = self.per_class();
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..self.classes {
            if self.gt_seen[k] {
                sum += per[k].unwrap_or(0.0);
                n += 1;
            }
        }
        if n == 0 {
            return Err(EngineError::EmptyTensor(
                "no classes present in ground truth".into(),
            ));
        }
        Ok(sum / n as f64)
    }
}

/// Mean IoU over a set of prediction/ground-truth pairs.
pub fn miou(preds: &[&[u8]], gts: &[&[u8]], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut acc = IouAccum::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    let m = acc.miou()?;
    Ok((m, acc.per_class()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basic_cases() {
        let gt = vec![1u8, 1, 0, 0];
        assert_eq!(iou(&gt, &gt, 1).unwrap(), Some(1.0));
        let disjoint = vec![0u8, 0, 1, 1];
        assert_eq!(iou(&disjoint, &gt, 1).unwrap(), Some(0.0));
        assert_eq!(iou(&gt, &gt, 7).unwrap(), None);
    }

    #[test]
    fn half_overlap_is_one_third() {
        // two squares of area 4 overlapping in 2 cells: 2 / (4 + 4 - 2) = 1/3
        let gt = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let pred = vec![0, 0, 1, 1, 1, 1, 0, 0];
        assert!((iou(&pred, &gt, 1).unwrap().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_mean_and_exclusions() {
        // class 1 IoU = 0.5, class 0 IoU = 1.0 on a crafted pair
        let gt = vec![0u8, 0, 1, 1];
        let pred = vec![0u8, 0, 1, 2];
        let (_, per) = miou(&[&pred], &[&gt], 4).unwrap();
        assert_eq!(per[3], None); // absent from both
        assert!(per[2].is_some()); // predicted only: defined IoU 0, excluded from mean
        let mut acc = IouAccum::new(4);
        acc.add(&pred, &gt).unwrap();
        // classes in gt: {0, 1}; IoU(0) = 2/2, IoU(1) = 1/2 -> mean 0.75
        assert!((acc.miou().unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_one() {
        let gt = vec![0u8, 1, 2, 1, 0];
        let (m, _) = miou(&[&gt.clone()], &[&gt], 3).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn empty_set_errors() {
        let acc = IouAccum::new(2);
        assert!(acc.miou().is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(iou(&[0, 1], &[0, 1, 2], 1).is_err());
    }
}
