//! Identity-matched lane F1.
//!
//! A predicted lane is a true positive when its mask overlaps the ground
//! truth mask of the same identity with IoU at or above the threshold.
//! Every other predicted lane is a false positive, every unmatched ground
//! truth lane a false negative.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decision threshold for both pixels and lane existence.
pub const THRESHOLD: f64 = 0.5;

/// Per-lane binary masks, `lanes × h × w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneMasks {
    lanes: usize,
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl LaneMasks {
    pub fn new(lanes: usize, h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != lanes * h * w {
            return Err(Error::dim("LaneMasks", format!("{} bits for {lanes}×{h}×{w}", bits.len())));
        }
        Ok(LaneMasks { lanes, h, w, bits })
    }

    /// Pixels strictly above `threshold` are set.
    pub fn from_probs(t: &Tensor, threshold: f64) -> Result<Self> {
        match *t.shape() {
            [lanes, h, w] => Self::new(lanes, h, w, t.data().iter().map(|&v| v > threshold).collect()),
            _ => Err(Error::dim("LaneMasks", format!("expected N×H×W, got {:?}", t.shape()))),
        }
    }

    /// Clears every lane whose flag is false.
    pub fn gated(mut self, present: &[bool]) -> Result<Self> {
        if present.len() != self.lanes {
            return Err(Error::dim("LaneMasks::gated", format!("{} flags for {} lanes", present.len(), self.lanes)));
        }
        let n = self.h * self.w;
        for (i, &keep) in present.iter().enumerate() {
            if !keep {
                self.bits[i * n..(i + 1) * n].fill(false);
            }
        }
        Ok(self)
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn lane(&self, i: usize) -> &[bool] {
        let n = self.h * self.w;
        &self.bits[i * n..(i + 1) * n]
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.lane(i).iter().any(|&b| b)
    }
}

/// Intersection over union of two masks; 0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// True/false positive and false negative tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `None` when there is no ground truth lane (recall undefined).
    pub fn score(&self) -> Option<F1Score> {
        let gt = self.tp + self.fn_;
        if gt == 0 {
            return None;
        }
        let predicted = self.tp + self.fp;
        let precision = if predicted == 0 { 0.0 } else { self.tp as f64 / predicted as f64 };
        let recall = self.tp as f64 / gt as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Some(F1Score { f1, precision, recall })
    }
}

pub fn match_lanes(pred: &LaneMasks, gt: &LaneMasks, iou_threshold: f64) -> Result<MatchCounts> {
    if (pred.lanes, pred.h, pred.w) != (gt.lanes, gt.h, gt.w) {
        return Err(Error::dim(
            "f1_metric",
            format!("{}×{}×{} vs {}×{}×{}", pred.lanes, pred.h, pred.w, gt.lanes, gt.h, gt.w),
        ));
    }
    let mut counts = MatchCounts::default();
    for i in 0..gt.lanes {
        let (p, g) = (pred.is_present(i), gt.is_present(i));
        let hit = p && g && mask_iou(pred.lane(i), gt.lane(i)) >= iou_threshold;
        if hit {
            counts.tp += 1;
        } else {
            counts.fp += p as usize;
            counts.fn_ += g as usize;
        }
    }
    Ok(counts)
}

/// F1 of one sample; `None` when the sample has no ground truth lane.
pub fn f1_metric(pred: &LaneMasks, gt: &LaneMasks, iou_threshold: f64) -> Result<Option<F1Score>> {
    Ok(match_lanes(pred, gt, iou_threshold)?.score())
}

/// Fraction of equal flags.
pub fn existence_accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn masks(lanes: &[&[u8]]) -> LaneMasks {
        let bits = lanes.iter().flat_map(|l| l.iter().map(|&b| b == 1)).collect();
        LaneMasks::new(lanes.len(), 1, lanes[0].len(), bits).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = masks(&[&[1, 1, 0, 0], &[0, 0, 1, 1]]);
        let s = f1_metric(&gt, &gt, 0.5).unwrap().unwrap();
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn empty_prediction() {
        let gt = masks(&[&[1, 1, 0, 0], &[0, 0, 0, 0]]);
        let pred = masks(&[&[0, 0, 0, 0], &[0, 0, 0, 0]]);
        let s = f1_metric(&pred, &gt, 0.5).unwrap().unwrap();
        assert_eq!((s.f1, s.precision, s.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_hit_one_miss_one_spurious() {
        let gt = masks(&[&[1, 1, 0, 0, 0, 0], &[0, 0, 1, 1, 0, 0], &[0, 0, 0, 0, 0, 0]]);
        let pred = masks(&[&[1, 1, 0, 0, 0, 0], &[0, 0, 0, 0, 0, 0], &[0, 0, 0, 0, 1, 1]]);
        let s = f1_metric(&pred, &gt, 0.5).unwrap().unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn low_overlap_counts_twice() {
        let gt = masks(&[&[1, 1, 1, 0]]);
        let pred = masks(&[&[0, 0, 1, 1]]);
        let c = match_lanes(&pred, &gt, 0.5).unwrap();
        assert_eq!(c, MatchCounts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn no_ground_truth_is_excluded() {
        let gt = masks(&[&[0, 0]]);
        assert!(f1_metric(&masks(&[&[1, 0]]), &gt, 0.5).unwrap().is_none());
        let other = LaneMasks::new(1, 1, 3, vec![false; 3]).unwrap();
        assert!(f1_metric(&other, &gt, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn joint_identity_permutation_is_harmless(
            bits in prop::collection::vec(any::<bool>(), 24),
            swap in 0usize..3,
        ) {
            let pred = LaneMasks::new(3, 1, 4, bits[..12].to_vec()).unwrap();
            let gt = LaneMasks::new(3, 1, 4, bits[12..].to_vec()).unwrap();
            let permute = |m: &LaneMasks| {
                let mut order = vec![0, 1, 2];
                order.swap(swap, (swap + 1) % 3);
                let b = order.iter().flat_map(|&i| m.lane(i).to_vec()).collect();
                LaneMasks::new(3, 1, 4, b).unwrap()
            };
            let a = f1_metric(&pred, &gt, 0.5).unwrap();
            let b = f1_metric(&permute(&pred), &permute(&gt), 0.5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
