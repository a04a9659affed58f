use platedpm::dpm::{
    distance_transform_message, non_maximum_suppression, DeformationParams, Detection, Label,
    ScoreMap,
};
use platedpm::imaging::BoundingBox;
use platedpm::pipeline::{
    enforce_digit_positions, order_by_center, suppress_overlaps_with, OverlapMetric,
};
use platedpm::train::{lr_schedule, TrainingConfig};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..200.0f64, 0.0..60.0f64, 1.0..40.0f64, 1.0..40.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
}

fn detection() -> impl Strategy<Value = Detection> {
    (
        bbox(),
        prop::sample::select(platedpm::ALPHABET.chars().collect::<Vec<_>>()),
        -3.0..3.0f64,
    )
        .prop_map(|(bbox, c, score)| Detection {
            bbox,
            label: Label::Char(c),
            score,
        })
}

fn text(d: &[Detection]) -> String {
    d.iter().filter_map(|d| d.label.as_char()).collect()
}

proptest! {
    #[test]
    fn overlaps_are_symmetric_and_bounded(a in bbox(), b in bbox()) {
        for (ab, ba) in [(a.iou(&b), b.iou(&a)), (a.min_area_overlap(&b), b.min_area_overlap(&a))] {
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
        prop_assert!(a.iou(&b) <= a.min_area_overlap(&b) + 1e-12);
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_transform_matches_naive(
        cw in 1usize..10, ch in 1usize..10, pw in 1usize..10, ph in 1usize..10,
        a in 0.01..2.0f64, b in 0.01..2.0f64, c in -1.0..1.0f64, d in -1.0..1.0f64,
        ax in -3i32..4, ay in -3i32..4,
        seed in proptest::collection::vec(-5.0..5.0f64, 100),
    ) {
        let child = ScoreMap::new(cw, ch, seed[..cw * ch].to_vec());
        let p = DeformationParams::new(-a, -b, c, d);
        let msg = distance_transform_message(&child, &p, (ax, ay), (pw, ph)).unwrap();
        for py in 0..ph {
            for px in 0..pw {
                let mut best = f64::NEG_INFINITY;
                for qy in 0..ch {
                    for qx in 0..cw {
                        let dx = qx as f64 - px as f64 - ax as f64;
                        let dy = qy as f64 - py as f64 - ay as f64;
                        best = best.max(child.get(qx, qy) + p.term(dx, dy));
                    }
                }
                prop_assert!((msg.values.get(px, py) - best).abs() < 1e-9);
                let (qx, qy) = msg.argmax_at(px, py);
                let dx = qx as f64 - px as f64 - ax as f64;
                let dy = qy as f64 - py as f64 - ay as f64;
                prop_assert!((child.get(qx, qy) + p.term(dx, dy) - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn suppression_keeps_a_non_overlapping_subset(dets in proptest::collection::vec(detection(), 0..25), ratio in 0.1..0.95f64) {
        for metric in [OverlapMetric::MinArea, OverlapMetric::Iou] {
            let (kept, dropped) = suppress_overlaps_with(&dets, ratio, metric);
            prop_assert_eq!(kept.len() + dropped.len(), dets.len());
            let ov = |a: &BoundingBox, b: &BoundingBox| match metric {
                OverlapMetric::MinArea => a.min_area_overlap(b),
                OverlapMetric::Iou => a.iou(b),
            };
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(ov(&a.bbox, &b.bbox) <= ratio);
                }
            }
            if let Some(best) = dets.iter().map(|d| d.score).reduce(f64::max) {
                prop_assert!(kept.iter().any(|d| d.score == best));
            }
        }
    }

    #[test]
    fn nms_output_never_overlaps_beyond_threshold(mut dets in proptest::collection::vec(detection(), 0..25)) {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let kept = non_maximum_suppression(dets, 0.5);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.min_area_overlap(&b.bbox) <= 0.5);
            }
        }
    }

    #[test]
    fn ordering_is_by_center_and_idempotent(dets in proptest::collection::vec(detection(), 0..20)) {
        let once = order_by_center(&dets);
        prop_assert_eq!(once.len(), dets.len());
        for w in once.windows(2) {
            prop_assert!(w[0].bbox.center().0 <= w[1].bbox.center().0);
        }
        prop_assert_eq!(order_by_center(&once), once);
    }

    #[test]
    fn digit_rule_output_has_digit_ends(dets in proptest::collection::vec(detection(), 0..12)) {
        let r = enforce_digit_positions(&dets);
        prop_assert_eq!(r.kept.len() + r.dropped.len(), dets.len());
        let t: Vec<char> = text(&r.kept).chars().collect();
        if r.satisfiable {
            prop_assert!(t.len() >= 2);
            prop_assert!(t[..2].iter().chain(&t[t.len() - 2..]).all(char::is_ascii_digit));
        } else {
            prop_assert_eq!(text(&r.kept), text(&dets));
        }
    }

    #[test]
    fn learning_rate_decreases_geometrically(i in 0usize..200) {
        let c = TrainingConfig::default();
        let (a, b) = (lr_schedule(&c, i), lr_schedule(&c, i + 1));
        prop_assert!(b < a && b > 0.0);
        prop_assert!((b / a - 0.9).abs() < 1e-12);
    }
}
