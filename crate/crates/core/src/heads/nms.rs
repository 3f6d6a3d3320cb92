//! Greedy non-maximum suppression.

use super::iou::iou_3d;
use crate::geometry::Box3d;

/// Indices kept by greedy suppression, in descending score order (ties by
/// lower index). A box is dropped when its IoU with an already kept box
/// exceeds `threshold`.
pub fn nms(boxes: &[Box3d], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_3d(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}
