use std::collections::BTreeMap;

use cspl_core::eval::{pr_curve, Outcome};
use cspl_core::{
    average_precision, match_detections, mean_ap, rank_by_difficulty, split, stage_plan, BoundingBox, Detection,
    DifficultyScore, GroundTruthObject, MatchResult, ScoredImage,
};
use proptest::prelude::*;

fn matches(outcomes: &[(bool, f64)]) -> Vec<MatchResult> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, &(tp, score))| MatchResult {
            image_id: "img".into(),
            class_name: "car".into(),
            detection_index: i,
            score,
            outcome: if tp { Outcome::TruePositive } else { Outcome::FalsePositive },
        })
        .collect()
}

/// Ranked outcomes with distinct scores in (0, 1), plus a ground-truth count
/// no smaller than the number of hits.
fn arb_ranking() -> impl Strategy<Value = (Vec<(bool, f64)>, usize)> {
    (prop::collection::vec(any::<bool>(), 0..12), 0usize..4).prop_map(|(hits, spare)| {
        let n = hits.len();
        let ranked: Vec<(bool, f64)> = hits
            .iter()
            .enumerate()
            .map(|(i, &h)| (h, 1.0 - (i as f64 + 1.0) / (n as f64 + 2.0)))
            .collect();
        let tp = hits.iter().filter(|h| **h).count();
        (ranked, tp + spare)
    })
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..40.0f64, 0.0..40.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

proptest! {
    #[test]
    fn ap_is_a_probability((ranked, gt) in arb_ranking()) {
        let ap = average_precision(&matches(&ranked), gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn only_ranks_matter((ranked, gt) in arb_ranking(), a in 0.1..5.0f64) {
        let base = average_precision(&matches(&ranked), gt).unwrap();
        // strictly increasing map of (0, 1) into itself
        let moved: Vec<(bool, f64)> = ranked.iter().map(|&(t, s)| (t, s.powf(a))).collect();
        prop_assert_eq!(average_precision(&matches(&moved), gt).unwrap(), base);
    }

    #[test]
    fn trailing_false_positive_never_helps((ranked, gt) in arb_ranking()) {
        let base = average_precision(&matches(&ranked), gt).unwrap();
        let mut more = ranked.clone();
        more.push((false, 0.0));
        prop_assert!(average_precision(&matches(&more), gt).unwrap() <= base);
    }

    #[test]
    fn leading_true_positive_never_hurts((ranked, gt) in arb_ranking()) {
        let base = average_precision(&matches(&ranked), gt).unwrap();
        let mut more = vec![(true, 1.0)];
        more.extend(ranked.iter().copied());
        prop_assert!(average_precision(&matches(&more), gt + 1).unwrap() >= base);
    }

    #[test]
    fn recall_never_decreases((ranked, gt) in arb_ranking()) {
        let curve = pr_curve(&matches(&ranked), gt, "car").unwrap();
        prop_assert!(curve.points.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert!(curve.points.iter().all(|&(r, p)| (0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn each_ground_truth_is_credited_once(
        gts in prop::collection::vec(prop::collection::vec(arb_box(), 0..5), 1..4),
        dets in prop::collection::vec(prop::collection::vec((arb_box(), 0.0..=1.0f64), 0..6), 1..4),
    ) {
        let n = gts.len().min(dets.len());
        let ground: BTreeMap<String, Vec<GroundTruthObject>> = (0..n)
            .map(|i| (format!("i{i}"), gts[i].iter().map(|b| GroundTruthObject::new("car", *b).unwrap()).collect()))
            .collect();
        let found: BTreeMap<String, Vec<Detection>> = (0..n)
            .map(|i| (format!("i{i}"), dets[i].iter().map(|(b, s)| Detection::new("car", *b, *s).unwrap()).collect()))
            .collect();
        let result = match_detections(&found, &ground, "car", 0.5).unwrap();
        for (id, objs) in &ground {
            let hits = result.iter().filter(|m| &m.image_id == id && m.outcome == Outcome::TruePositive).count();
            prop_assert!(hits <= objs.len());
        }
        let vocab = vec!["car".to_string()];
        let first = mean_ap(&found, &ground, &vocab).unwrap();
        let second = mean_ap(&found, &ground, &vocab).unwrap();
        prop_assert_eq!(first.mean_ap.to_bits(), second.mean_ap.to_bits());
    }

    #[test]
    fn split_is_an_ordered_partition(
        scores in prop::collection::vec(prop::option::of(0u8..6), 1..60),
        k in 1usize..12,
    ) {
        prop_assume!(scores.len() >= k);
        let scored: Vec<ScoredImage> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let score = match s {
                    Some(v) => DifficultyScore::finite(f64::from(*v)).unwrap(),
                    None => DifficultyScore::Infinite,
                };
                ScoredImage::new(format!("im{:02}", (i * 37) % 101), score)
            })
            .collect();
        let ranked = rank_by_difficulty(scored).unwrap();
        let batches = split(&ranked, k).unwrap();
        let flat: Vec<&String> = batches.iter().flat_map(|b| &b.image_ids).collect();
        let order: Vec<&String> = ranked.iter().map(|s| &s.image_id).collect();
        prop_assert_eq!(flat, order);
        let n = ranked.len();
        for (i, b) in batches.iter().enumerate() {
            prop_assert_eq!(b.index, i + 1);
            prop_assert_eq!(b.image_ids.len(), n / k + usize::from(i < n % k));
        }
    }

    #[test]
    fn schedule_sums_to_total(k in 1usize..12, early in 1u64..100, extra in 1u64..1000) {
        let total = (k as u64 - 1) * early + extra;
        let plan = stage_plan(k, total, early).unwrap();
        prop_assert_eq!(plan.len(), k);
        prop_assert_eq!(plan.iter().map(|s| s.iterations).sum::<u64>(), total);
        prop_assert!(plan.iter().all(|s| s.iterations > 0 && s.batch_indices == (1..=s.stage_index).collect::<Vec<_>>()));
        prop_assert!(stage_plan(k, total - extra, early).is_err());
    }
}
