use super::{iou, Detection};

/// Greedy non-maximum suppression.
///
/// Detections scoring below `score_threshold` are dropped; the rest are
/// visited in descending score order (input order on ties) and kept unless
/// they overlap an already kept box with IoU above `iou_threshold`.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f64,
    score_threshold: f64,
    max_out: usize,
) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() >= max_out {
            break;
        }
        let d = &detections[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}
