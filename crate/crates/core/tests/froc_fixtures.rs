//! Hand-enumerated FROC fixtures, an exhaustive matching oracle and
//! ordering invariants.

use msb_core::detection::{iou, BoundingBox, Detection};
use msb_core::froc::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(x: f64, y: f64, side: f64) -> BoundingBox {
    BoundingBox::new(x, y, x + side, y + side).unwrap()
}

fn det(image: &str, b: BoundingBox, score: f64) -> Detection {
    Detection {
        image_id: image.into(),
        bbox: b,
        score,
    }
}

fn ann(image: &str, b: BoundingBox, diameter_mm: f64) -> Annotation {
    Annotation {
        image_id: image.into(),
        bbox: b,
        diameter_mm,
    }
}

/// img1: TP at 0.9, FP at 0.8. img2: FP at 0.7, TP at 0.6.
fn two_image_fixture() -> Vec<ImageEval> {
    let gt1 = bx(10.0, 10.0, 20.0);
    let gt2 = bx(40.0, 40.0, 20.0);
    let far = bx(100.0, 100.0, 10.0);
    let dets = vec![
        det("img1", gt1, 0.9),
        det("img1", far, 0.8),
        det("img2", far, 0.7),
        det("img2", gt2, 0.6),
    ];
    let anns = vec![ann("img1", gt1, 20.0), ann("img2", gt2, 20.0)];
    group_by_image(&[], &dets, &anns)
}

#[test]
fn two_image_curve_is_hand_enumerated() {
    let curve = froc(&two_image_fixture(), 0.5).unwrap();
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fp_per_image, p.sensitivity)).collect();
    assert_eq!(pts, vec![(0.0, 0.5), (0.5, 0.5), (1.0, 0.5), (1.0, 1.0)]);
    let thresholds: Vec<f64> = curve.points.iter().map(|p| p.threshold).collect();
    assert_eq!(thresholds, vec![0.9, 0.8, 0.7, 0.6]);
}

#[test]
fn two_image_sensitivities_are_exact() {
    let curve = froc(&two_image_fixture(), 0.5).unwrap();
    let s = sensitivity_at(&curve, &DEFAULT_FP_RATES, SensitivityMode::Step);
    assert_eq!(s, vec![0.5, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn interpolated_mode_reads_between_points() {
    let curve = froc(&two_image_fixture(), 0.5).unwrap();
    let s = sensitivity_at(&curve, &[0.25, 1.0, 8.0], SensitivityMode::Interpolate);
    assert_eq!(s, vec![0.5, 1.0, 1.0]);
}

/// Diameters 5, 20, 50 and 150 mm; the 150 mm lesion is missed.
fn bucket_fixture() -> Vec<ImageEval> {
    let boxes = [bx(0.0, 0.0, 5.0), bx(20.0, 0.0, 20.0), bx(0.0, 50.0, 50.0), bx(100.0, 100.0, 150.0)];
    let anns: Vec<_> = boxes.iter().zip([5.0, 20.0, 50.0, 150.0]).map(|(b, d)| ann("scan", *b, d)).collect();
    let dets: Vec<_> = boxes[..3].iter().zip([0.9, 0.8, 0.7]).map(|(b, s)| det("scan", *b, s)).collect();
    group_by_image(&[], &dets, &anns)
}

#[test]
fn bucket_fixture_table() {
    let report = size_bucketed_sensitivity(&bucket_fixture(), &SizeBuckets::default(), 4.0, 0.5).unwrap();
    let got: Vec<Option<f64>> = report.buckets.iter().map(|b| b.sensitivity).collect();
    assert_eq!(got, vec![Some(1.0), Some(1.0), Some(1.0), None, Some(0.0)]);
    let labels: Vec<&str> = report.buckets.iter().map(|b| b.label.as_str()).collect();
    assert_eq!(labels, vec!["<10", "10-30", "30-60", "60-100", ">100"]);
}

#[test]
fn perfect_detector_on_one_bucket() {
    let gts = [bx(0.0, 0.0, 20.0), bx(50.0, 50.0, 15.0)];
    let anns: Vec<_> = gts.iter().map(|b| ann("a", *b, 20.0)).collect();
    let dets: Vec<_> = gts.iter().map(|b| det("a", *b, 0.9)).collect();
    let report =
        size_bucketed_sensitivity(&group_by_image(&[], &dets, &anns), &SizeBuckets::default(), 4.0, 0.5).unwrap();
    let got: Vec<Option<f64>> = report.buckets.iter().map(|b| b.sensitivity).collect();
    assert_eq!(got, vec![None, Some(1.0), None, None, None]);
}

/// Lexicographic best over every injective partial matching, visiting
/// detections by descending score: matched beats unmatched, then higher IoU,
/// then lower annotation index.
fn matching_oracle(dets: &[Detection], anns: &[Annotation], t: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));

    fn search(
        k: usize,
        order: &[usize],
        dets: &[Detection],
        anns: &[Annotation],
        t: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(u8, f64, i64)>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<(u8, f64, i64)> = order
                .iter()
                .map(|&d| match current[d] {
                    Some(g) => (1, iou(&dets[d].bbox, &anns[g].bbox), -(g as i64)),
                    None => (0, 0.0, 0),
                })
                .collect();
            let better = best.as_ref().is_none_or(|(bk, _)| {
                key.partial_cmp(bk) == Some(std::cmp::Ordering::Greater)
            });
            if better {
                *best = Some((key, current.clone()));
            }
            return;
        }
        let d = order[k];
        search(k + 1, order, dets, anns, t, used, current, best);
        for g in 0..anns.len() {
            if !used[g] && iou(&dets[d].bbox, &anns[g].bbox) >= t {
                used[g] = true;
                current[d] = Some(g);
                search(k + 1, order, dets, anns, t, used, current, best);
                current[d] = None;
                used[g] = false;
            }
        }
    }

    let mut best = None;
    search(
        0,
        &order,
        dets,
        anns,
        t,
        &mut vec![false; anns.len()],
        &mut vec![None; dets.len()],
        &mut best,
    );
    best.unwrap().1
}

#[test]
fn greedy_matching_agrees_with_enumeration() {
    let mut g = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..300 {
        for image in ["a", "b", "c"] {
            let anns: Vec<_> = (0..g.random_range(0..4))
                .map(|_| ann(image, bx(g.random_range(0..20) as f64, g.random_range(0..20) as f64, 8.0), 8.0))
                .collect();
            let dets: Vec<_> = (0..g.random_range(0..6))
                .map(|_| {
                    let side = g.random_range(5..12) as f64;
                    let b = bx(g.random_range(0..20) as f64, g.random_range(0..20) as f64, side);
                    det(image, b, g.random_range(0..4) as f64 / 4.0)
                })
                .collect();
            let m = match_detections(&dets, &anns, 0.3);
            let want = matching_oracle(&dets, &anns, 0.3);
            for (d, w) in want.iter().enumerate() {
                assert_eq!(m.is_true_positive[d], w.is_some());
                if let Some(gi) = w {
                    assert_eq!(m.matched_by[*gi], Some(d));
                }
            }
        }
    }
}

/// Scene where every detection either sits exactly on its own annotation or
/// overlaps nothing, so TP/FP composition per score is order-independent.
fn separable_scene(g: &mut ChaCha8Rng) -> (Vec<String>, Vec<Detection>, Vec<Annotation>) {
    let ids: Vec<String> = (0..4).map(|i| format!("im{i}")).collect();
    let mut dets = Vec::new();
    let mut anns = Vec::new();
    for id in &ids {
        for k in 0..g.random_range(0..4) {
            let b = bx(30.0 * k as f64, 0.0, 10.0);
            anns.push(ann(id, b, g.random_range(3.0..200.0)));
            if g.random_bool(0.6) {
                dets.push(det(id, b, g.random_range(1..5) as f64 / 5.0));
            }
        }
        for k in 0..g.random_range(0..4) {
            dets.push(det(id, bx(30.0 * k as f64, 500.0, 10.0), g.random_range(1..5) as f64 / 5.0));
        }
    }
    if anns.is_empty() {
        anns.push(ann(&ids[0], bx(900.0, 900.0, 10.0), 12.0));
    }
    (ids, dets, anns)
}

#[test]
fn image_and_insertion_order_do_not_matter() {
    let mut g = ChaCha8Rng::seed_from_u64(5);
    let opts = EvalOptions::default();
    for _ in 0..100 {
        let (mut ids, mut dets, mut anns) = separable_scene(&mut g);
        let base = evaluate(&group_by_image(&ids, &dets, &anns), &opts).unwrap();
        ids.shuffle(&mut g);
        dets.shuffle(&mut g);
        anns.shuffle(&mut g);
        let again = evaluate(&group_by_image(&ids, &dets, &anns), &opts).unwrap();
        assert_eq!(base, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sensitivity_is_monotone_in_rate(seed in any::<u64>()) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let (ids, dets, anns) = separable_scene(&mut g);
        let curve = froc(&group_by_image(&ids, &dets, &anns), 0.5).unwrap();
        for pair in curve.points.windows(2) {
            prop_assert!(pair[0].fp_per_image <= pair[1].fp_per_image);
            prop_assert!(pair[0].sensitivity <= pair[1].sensitivity);
        }
        let rates = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 100.0];
        for mode in [SensitivityMode::Step, SensitivityMode::Interpolate] {
            let s = sensitivity_at(&curve, &rates, mode);
            for pair in s.windows(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
        }
    }

    #[test]
    fn zero_score_detection_leaves_positive_thresholds_alone(seed in any::<u64>(), x in 0.0f64..100.0) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let (ids, mut dets, anns) = separable_scene(&mut g);
        let before = froc(&group_by_image(&ids, &dets, &anns), 0.5).unwrap();
        dets.push(det(&ids[0], bx(x, x, 10.0), 0.0));
        let after = froc(&group_by_image(&ids, &dets, &anns), 0.5).unwrap();
        let above: Vec<_> = after.points.iter().filter(|p| p.threshold > 0.0).cloned().collect();
        prop_assert_eq!(above, before.points);
    }

    #[test]
    fn buckets_sum_to_global_counts(seed in any::<u64>()) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let (ids, dets, anns) = separable_scene(&mut g);
        let images = group_by_image(&ids, &dets, &anns);
        let report = size_bucketed_sensitivity(&images, &SizeBuckets::default(), 4.0, 0.5).unwrap();
        let matched: usize = report.buckets.iter().map(|b| b.matched).sum();
        let total: usize = report.buckets.iter().map(|b| b.total).sum();
        prop_assert_eq!(total, anns.len());
        let curve = froc(&images, 0.5).unwrap();
        let tp = curve
            .points
            .iter()
            .find(|p| p.threshold == report.threshold)
            .map_or(0, |p| p.true_positives);
        prop_assert_eq!(matched, tp);
    }
}
