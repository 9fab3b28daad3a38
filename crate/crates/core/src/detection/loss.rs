use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{encode_box, iou, BoundingBox, BoxDeltas};
use crate::tensor::sigmoid_scalar;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor training target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub label: AnchorLabel,
    /// Ground truth with the highest IoU for this anchor (first on ties).
    pub gt_index: Option<usize>,
    pub max_iou: f64,
    /// Encoded regression target; present for positives.
    pub target: Option<BoxDeltas>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.7,
            negative_iou: 0.3,
        }
    }
}

/// Labels anchors against ground truth.
///
/// Positive: IoU >= `positive_iou` with some box, or the anchor attains a
/// ground truth's best IoU (all ties included). Negative: best IoU below
/// `negative_iou`. Everything else is ignored.
pub fn assign_targets(
    anchors: &[BoundingBox],
    ground_truth: &[BoundingBox],
    cfg: &AssignmentConfig,
) -> Result<Vec<Assignment>> {
    let mut best_for_gt = vec![0.0f64; ground_truth.len()];
    let mut out: Vec<Assignment> = anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in ground_truth.iter().enumerate() {
                let v = iou(a, gt);
                if v > best_for_gt[g] {
                    best_for_gt[g] = v;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let max_iou = best.map_or(0.0, |(_, v)| v);
            let label = if max_iou >= cfg.positive_iou {
                AnchorLabel::Positive
            } else if max_iou < cfg.negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            Assignment {
                label,
                gt_index: best.map(|(g, _)| g),
                max_iou,
                target: None,
            }
        })
        .collect();

    for (g, gt) in ground_truth.iter().enumerate() {
        if best_for_gt[g] <= 0.0 {
            continue;
        }
        for (a, anchor) in anchors.iter().enumerate() {
            if iou(anchor, gt) == best_for_gt[g] {
                out[a].label = AnchorLabel::Positive;
            }
        }
    }

    for (a, asg) in out.iter_mut().enumerate() {
        if asg.label == AnchorLabel::Positive {
            let gt = &ground_truth[asg.gt_index.expect("positive has a match")];
            asg.target = Some(encode_box(&anchors[a], gt)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Anchors sampled per image.
    pub batch_per_image: usize,
    /// Upper bound on the positive share of the sample.
    pub positive_fraction: f64,
    /// Transition point of the smooth-L1 regression loss.
    pub smooth_l1_beta: f64,
    pub regression_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            batch_per_image: 256,
            positive_fraction: 0.5,
            smooth_l1_beta: 1.0 / 9.0,
            regression_weight: 1.0,
        }
    }
}

/// Chooses up to `batch_per_image` labelled anchors, at most
/// `positive_fraction` of them positive, uniformly at random.
pub fn sample_anchors<R: Rng + ?Sized>(
    assignments: &[Assignment],
    cfg: &LossConfig,
    rng: &mut R,
) -> Vec<bool> {
    let pos: Vec<usize> = indices_with(assignments, AnchorLabel::Positive);
    let neg: Vec<usize> = indices_with(assignments, AnchorLabel::Negative);
    let max_pos = (cfg.batch_per_image as f64 * cfg.positive_fraction) as usize;
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(cfg.batch_per_image - n_pos);
    let mut mask = vec![false; assignments.len()];
    for i in sample(rng, pos.len(), n_pos) {
        mask[pos[i]] = true;
    }
    for i in sample(rng, neg.len(), n_neg) {
        mask[neg[i]] = true;
    }
    mask
}

fn indices_with(assignments: &[Assignment], label: AnchorLabel) -> Vec<usize> {
    assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| a.label == label)
        .map(|(i, _)| i)
        .collect()
}

/// Loss value with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss<T> {
    pub total: T,
    /// Mean binary cross-entropy over sampled anchors.
    pub classification: T,
    /// Smooth-L1 summed over coordinates, averaged over sampled positives.
    pub regression: T,
    pub grad_logits: Vec<T>,
    /// Four entries per anchor, `(dx, dy, dw, dh)`.
    pub grad_deltas: Vec<T>,
}

fn softplus<T: Scalar>(z: T) -> T {
    if z == T::infinity() {
        return z;
    }
    if z == T::neg_infinity() {
        return T::zero();
    }
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy on objectness logits plus smooth-L1 on the deltas of
/// sampled positives.
pub fn detection_loss<T: Scalar>(
    class_logits: &[T],
    box_deltas: &[T],
    assignments: &[Assignment],
    sampled: &[bool],
    cfg: &LossConfig,
) -> Result<DetectionLoss<T>> {
    let n = assignments.len();
    if class_logits.len() != n || box_deltas.len() != 4 * n || sampled.len() != n {
        return Err(Error::shape(format!(
            "loss inputs misaligned: {} logits, {} deltas, {} samples for {n} anchors",
            class_logits.len(),
            box_deltas.len(),
            sampled.len()
        )));
    }
    let sampled_count = sampled.iter().filter(|&&s| s).count();
    if sampled_count == 0 {
        return Err(Error::Undefined("no sampled anchors for the detection loss".into()));
    }
    let positives = (0..n)
        .filter(|&i| sampled[i] && assignments[i].label == AnchorLabel::Positive)
        .count();

    let beta = T::of(cfg.smooth_l1_beta);
    let half = T::of(0.5);
    let cls_norm = T::of(sampled_count as f64);
    let reg_norm = T::of(positives.max(1) as f64);
    let reg_w = T::of(cfg.regression_weight);

    let mut cls = T::zero();
    let mut reg = T::zero();
    let mut grad_logits = vec![T::zero(); n];
    let mut grad_deltas = vec![T::zero(); 4 * n];
    for i in 0..n {
        if !sampled[i] {
            continue;
        }
        let x = class_logits[i];
        let (y, term) = match assignments[i].label {
            AnchorLabel::Positive => (T::one(), softplus(-x)),
            AnchorLabel::Negative => (T::zero(), softplus(x)),
            AnchorLabel::Ignore => {
                return Err(Error::config(format!("anchor {i} is sampled but ignored")))
            }
        };
        cls += term;
        grad_logits[i] = (sigmoid_scalar(x) - y) / cls_norm;

        if assignments[i].label == AnchorLabel::Positive {
            let target = assignments[i]
                .target
                .ok_or_else(|| Error::config(format!("positive anchor {i} has no target")))?
                .to_array();
            for k in 0..4 {
                let d = box_deltas[4 * i + k] - T::of(target[k]);
                let (v, g) = if d.abs() < beta {
                    (half * d * d / beta, d / beta)
                } else {
                    (d.abs() - half * beta, d.signum())
                };
                reg += v;
                grad_deltas[4 * i + k] = reg_w * g / reg_norm;
            }
        }
    }
    let classification = cls / cls_norm;
    let regression = reg / reg_norm;
    Ok(DetectionLoss {
        total: classification + reg_w * regression,
        classification,
        regression,
        grad_logits,
        grad_deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(a: f64, c: f64, d: f64, e: f64) -> BoundingBox {
        BoundingBox::new(a, c, d, e).unwrap()
    }

    #[test]
    fn no_ground_truth_all_negative() {
        let anchors = vec![b(0.0, 0.0, 4.0, 4.0), b(2.0, 2.0, 6.0, 6.0)];
        let a = assign_targets(&anchors, &[], &AssignmentConfig::default()).unwrap();
        assert!(a.iter().all(|x| x.label == AnchorLabel::Negative && x.gt_index.is_none()));
    }

    #[test]
    fn exact_match_positive() {
        let anchors = vec![b(0.0, 0.0, 4.0, 4.0), b(10.0, 10.0, 14.0, 14.0)];
        let a = assign_targets(&anchors, &[anchors[1]], &AssignmentConfig::default()).unwrap();
        assert_eq!(a[1].label, AnchorLabel::Positive);
        assert_eq!(a[1].max_iou, 1.0);
        assert_eq!(a[1].target, Some(BoxDeltas::default()));
        assert_eq!(a[0].label, AnchorLabel::Negative);
    }

    #[test]
    fn low_overlap_gt_still_gets_argmax_anchor() {
        let anchors = vec![b(0.0, 0.0, 8.0, 8.0), b(8.0, 0.0, 16.0, 8.0)];
        let gt = b(5.0, 1.0, 7.0, 3.0);
        let a = assign_targets(&anchors, &[gt], &AssignmentConfig::default()).unwrap();
        assert_eq!(a[0].label, AnchorLabel::Positive);
        assert_eq!(a[1].label, AnchorLabel::Negative);
    }

    fn labels(pos: usize, neg: usize) -> Vec<Assignment> {
        let mk = |label| Assignment {
            label,
            gt_index: None,
            max_iou: 0.0,
            target: Some(BoxDeltas::default()),
        };
        (0..pos)
            .map(|_| mk(AnchorLabel::Positive))
            .chain((0..neg).map(|_| mk(AnchorLabel::Negative)))
            .collect()
    }

    #[test]
    fn sampling_caps_positives() {
        let a = labels(300, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_anchors(&a, &LossConfig::default(), &mut rng);
        assert_eq!(m[..300].iter().filter(|&&s| s).count(), 128);
        assert_eq!(m.iter().filter(|&&s| s).count(), 256);
        let a = labels(3, 10);
        let m = sample_anchors(&a, &LossConfig::default(), &mut rng);
        assert!(m.iter().all(|&s| s));
    }

    #[test]
    fn perfect_predictions_zero_loss() {
        let a = labels(2, 2);
        let logits = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let deltas = [0.0; 16];
        let l = detection_loss(&logits, &deltas, &a, &[true; 4], &LossConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.grad_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_logits_balanced_is_ln2() {
        let a = labels(2, 2);
        let l = detection_loss(&[0.0; 4], &[0.0; 16], &a, &[true; 4], &LossConfig::default()).unwrap();
        assert!((l.classification - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.regression, 0.0);
    }

    #[test]
    fn nothing_sampled_is_error() {
        let a = labels(1, 1);
        assert!(detection_loss(&[0.0; 2], &[0.0; 8], &a, &[false; 2], &LossConfig::default()).is_err());
    }
}
