use crate::geometry::{iou, Region};

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (ties to the lower index) and keeps a
/// box unless its hard IoU with an already kept box exceeds `nms_iou`.
/// Stops after `limit` boxes. Returns kept indices in visiting order.
pub fn greedy_nms(boxes: &[Region], scores: &[f64], nms_iou: f64, limit: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(limit.min(boxes.len()));
    for i in order {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= nms_iou) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identical_boxes_keep_one() {
        let b = vec![r(0.0, 0.0, 1.0, 1.0); 4];
        assert_eq!(greedy_nms(&b, &[0.1, 0.5, 0.5, 0.2], 0.3, 5), vec![1]);
    }

    #[test]
    fn limit_and_order() {
        let b = vec![
            r(0.0, 0.0, 1.0, 1.0),
            r(2.0, 0.0, 3.0, 1.0),
            r(4.0, 0.0, 5.0, 1.0),
        ];
        assert_eq!(greedy_nms(&b, &[1.0, 3.0, 2.0], 0.0, 2), vec![1, 2]);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        let b = vec![r(0.0, 0.0, 1.0, 1.0), r(1.0, 0.0, 2.0, 1.0)];
        assert_eq!(greedy_nms(&b, &[1.0, 0.5], 0.0, 5), vec![0, 1]);
    }
}
