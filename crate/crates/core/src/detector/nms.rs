use crate::geometry::BBox;

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (ties: lower index first), keeps each
/// box that overlaps no already-kept box by more than `iou_threshold`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes_keep_the_best() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
        // tie goes to the lower index
        assert_eq!(nms(&[b, b], &[0.7, 0.7], 0.5), vec![0]);
    }

    #[test]
    fn disjoint_boxes_all_kept_in_score_order() {
        let boxes = [
            BBox::new(0.0, 0.0, 5.0, 5.0),
            BBox::new(10.0, 0.0, 15.0, 5.0),
            BBox::new(20.0, 0.0, 25.0, 5.0),
        ];
        assert_eq!(nms(&boxes, &[0.2, 0.9, 0.5], 0.5), vec![1, 2, 0]);
    }

    #[test]
    fn single_box_and_empty_input() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(nms(&[b], &[0.3], 0.5), vec![0]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn kept_boxes_overlap_at_most_threshold(
            boxes in proptest::collection::vec(arb_box(), 1..12),
            thr in 0.05..1.0f64,
            seed in any::<u64>(),
        ) {
            let scores: Vec<f64> = (0..boxes.len()).map(|i| ((seed >> (i % 60)) & 0xff) as f64).collect();
            let keep = nms(&boxes, &scores, thr);
            prop_assert!(!keep.is_empty());
            for (a, &i) in keep.iter().enumerate() {
                for &j in &keep[a + 1..] {
                    prop_assert!(boxes[i].iou(&boxes[j]) <= thr);
                }
            }
        }
    }
}
