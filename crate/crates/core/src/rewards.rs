//! Reward functions for diagnosis-style predictions.
//!
//! Three channels feed the scalar training reward:
//!
//! - accuracy: F1 between predicted and gold labels treated as unordered sets,
//! - semantic alignment: the best intersection-over-union between any
//!   predicted bounding box and the gold segmentation mask,
//! - format: a binary reward that is 1 only when every predicted label comes
//!   with at least one bounding box.
//!
//! The combined reward is the weighted sum of the three, weights (0.6, 0.2,
//! 0.2) by default.

use serde::{Deserialize, Serialize};
use std::collections::btree_set;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("mask dimensions must be positive, got {height}x{width}")]
    EmptyMask { height: usize, width: usize },
    #[error("box extent must be nonnegative, got w={w}, h={h}")]
    NegativeBoxExtent { w: f64, h: f64 },
    #[error("reward weights must be nonnegative with a positive sum")]
    InvalidWeights,
}

/// An unordered set of label strings. Labels are trimmed on insertion and
/// compared case-sensitively; duplicates collapse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(BTreeSet<String>);

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: &str) -> bool {
        self.0.insert(label.trim().to_string())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label.trim())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> btree_set::Iter<'_, String> {
        self.0.iter()
    }

    pub fn intersection_size(&self, other: &LabelSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

impl<S: AsRef<str>> FromIterator<S> for LabelSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        LabelSet(iter.into_iter().map(|s| s.as_ref().trim().to_string()).collect())
    }
}

/// Axis-aligned bounding box in pixel units, `(x, y, w, h)` with the origin
/// at the top-left corner of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, RewardError> {
        if w < 0.0 || h < 0.0 {
            return Err(RewardError::NegativeBoxExtent { w, h });
        }
        Ok(Self { x, y, w, h })
    }
}

/// Binary segmentation mask on an `H x W` cell grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    /// All-zero mask. Dimensions must be positive.
    pub fn zeros(height: usize, width: usize) -> Result<Self, RewardError> {
        if height == 0 || width == 0 {
            return Err(RewardError::EmptyMask { height, width });
        }
        Ok(Self { height, width, cells: vec![false; height * width] })
    }

    pub fn ones(height: usize, width: usize) -> Result<Self, RewardError> {
        let mut m = Self::zeros(height, width)?;
        m.cells.fill(true);
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    /// Marks every cell whose center lies inside the (clipped) box.
    pub fn fill_box(&mut self, bbox: &BoundingBox) {
        let (r0, r1, c0, c1) = cell_range(bbox, self.height, self.width);
        for row in r0..r1 {
            for col in c0..c1 {
                self.set(row, col, true);
            }
        }
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Weights for the (accuracy, IoU, auxiliary) reward channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub acc: f64,
    pub iou: f64,
    pub aux: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { acc: 0.6, iou: 0.2, aux: 0.2 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let nonneg = self.acc >= 0.0 && self.iou >= 0.0 && self.aux >= 0.0;
        if !nonneg || self.acc + self.iou + self.aux <= 0.0 {
            return Err(RewardError::InvalidWeights);
        }
        Ok(())
    }
}

/// F1 of the set overlap between prediction and gold:
/// `2 * |pred ∩ gold| / (|pred| + |gold|)`.
///
/// Two empty sets score 1.0: a correct "no finding" prediction earns full
/// reward rather than a zero-denominator fallback.
pub fn set_f1(pred: &LabelSet, gold: &LabelSet) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let overlap = pred.intersection_size(gold);
    2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
}

/// Grid cell index range `[r0, r1) x [c0, c1)` whose centers fall inside the
/// box, clipped to the grid. A cell `(row, col)` has center
/// `(col + 0.5, row + 0.5)`.
fn cell_range(bbox: &BoundingBox, height: usize, width: usize) -> (usize, usize, usize, usize) {
    // col + 0.5 >= x  =>  col >= x - 0.5 ; col + 0.5 < x + w  =>  col < x + w - 0.5
    let c0 = (bbox.x - 0.5).ceil().max(0.0) as usize;
    let c1 = ((bbox.x + bbox.w - 0.5).ceil().max(0.0) as usize).min(width);
    let r0 = (bbox.y - 0.5).ceil().max(0.0) as usize;
    let r1 = ((bbox.y + bbox.h - 0.5).ceil().max(0.0) as usize).min(height);
    (r0.min(height), r1, c0.min(width), c1)
}

/// Best intersection-over-union between any predicted box and the mask.
///
/// Boxes are rasterized onto the mask grid: a cell counts as inside the box
/// when its center lies within `[x, x+w) x [y, y+h)`. Boxes reaching outside
/// the grid are clipped. Returns 0.0 for an empty box list or an all-zero
/// mask.
pub fn best_iou(boxes: &[BoundingBox], mask: &Mask) -> f64 {
    let mask_area = mask.count_ones();
    if boxes.is_empty() || mask_area == 0 {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for bbox in boxes {
        let (r0, r1, c0, c1) = cell_range(bbox, mask.height, mask.width);
        let mut intersection = 0usize;
        for row in r0..r1 {
            for col in c0..c1 {
                if mask.get(row, col) {
                    intersection += 1;
                }
            }
        }
        let box_area = r1.saturating_sub(r0) * c1.saturating_sub(c0);
        let union = mask_area + box_area - intersection;
        if union > 0 {
            best = best.max(intersection as f64 / union as f64);
        }
    }
    best
}

/// 1.0 iff every predicted label has at least one associated bounding box.
///
/// An empty prediction set scores 1.0 (the quantifier is vacuously true); an
/// empty prediction still forfeits the accuracy and IoU channels, so this is
/// not exploitable.
pub fn format_reward(pred: &LabelSet, boxes_per_label: &BTreeMap<String, usize>) -> f64 {
    let covered = pred
        .iter()
        .all(|label| boxes_per_label.get(label).copied().unwrap_or(0) >= 1);
    if covered {
        1.0
    } else {
        0.0
    }
}

/// Weighted combination of the three reward channels.
pub fn combine(acc: f64, iou: f64, aux: f64, weights: &RewardWeights) -> f64 {
    weights.acc * acc + weights.iou * iou + weights.aux * aux
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(items: &[&str]) -> LabelSet {
        items.iter().collect()
    }

    #[test]
    fn set_f1_exact_match() {
        assert_eq!(set_f1(&labels(&["Pneumonia"]), &labels(&["Pneumonia"])), 1.0);
    }

    #[test]
    fn set_f1_no_overlap() {
        assert_eq!(set_f1(&labels(&[]), &labels(&["Edema"])), 0.0);
    }

    #[test]
    fn set_f1_partial_overlap() {
        // precision 0.5, recall 1.0 -> F1 = 2/3
        let f1 = set_f1(&labels(&["A", "B"]), &labels(&["A"]));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn set_f1_both_empty_is_full_reward() {
        assert_eq!(set_f1(&labels(&[]), &labels(&[])), 1.0);
    }

    #[test]
    fn labels_trim_and_dedup() {
        let a = labels(&[" A", "A ", "B"]);
        assert_eq!(a.len(), 2);
        assert!(a.contains("A"));
    }

    #[test]
    fn best_iou_identity() {
        let mask = Mask::ones(10, 10).unwrap();
        let bbox = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(best_iou(&[bbox], &mask), 1.0);
    }

    #[test]
    fn best_iou_disjoint() {
        let mut mask = Mask::zeros(8, 8).unwrap();
        mask.set(7, 7, true);
        let bbox = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(best_iou(&[bbox], &mask), 0.0);
    }

    #[test]
    fn best_iou_partial_overlap() {
        // box (0,0,4,4) vs mask ones on columns 2..=5, rows 0..=3 of 8x8:
        // intersection 8 cells, union 24 -> 1/3.
        let mut mask = Mask::zeros(8, 8).unwrap();
        for row in 0..=3 {
            for col in 2..=5 {
                mask.set(row, col, true);
            }
        }
        let bbox = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let iou = best_iou(&[bbox], &mask);
        assert!((iou - 1.0 / 3.0).abs() < 1e-9, "got {iou}");
    }

    #[test]
    fn best_iou_empty_inputs() {
        let mask = Mask::ones(4, 4).unwrap();
        assert_eq!(best_iou(&[], &mask), 0.0);
        let zero = Mask::zeros(4, 4).unwrap();
        let bbox = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        assert_eq!(best_iou(&[bbox], &zero), 0.0);
    }

    #[test]
    fn best_iou_clips_out_of_grid_boxes() {
        let mask = Mask::ones(4, 4).unwrap();
        let bbox = BoundingBox::new(-10.0, -10.0, 100.0, 100.0).unwrap();
        assert_eq!(best_iou(&[bbox], &mask), 1.0);
    }

    #[test]
    fn format_reward_cases() {
        let mut boxes = BTreeMap::new();
        boxes.insert("A".to_string(), 1);
        boxes.insert("B".to_string(), 2);
        assert_eq!(format_reward(&labels(&["A", "B"]), &boxes), 1.0);
        boxes.remove("B");
        assert_eq!(format_reward(&labels(&["A", "B"]), &boxes), 0.0);
        assert_eq!(format_reward(&labels(&[]), &boxes), 1.0);
    }

    #[test]
    fn combine_paper_weights() {
        let w = RewardWeights::default();
        assert!((combine(1.0, 1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        assert_eq!(combine(0.0, 0.0, 0.0, &w), 0.0);
        assert!((combine(0.5, 0.25, 1.0, &w) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights { acc: 0.0, iou: 0.0, aux: 0.0 }.validate().is_err());
        assert!(RewardWeights { acc: -0.1, iou: 0.6, aux: 0.5 }.validate().is_err());
        assert!(RewardWeights::default().validate().is_ok());
    }
}
