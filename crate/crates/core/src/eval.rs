//! PASCAL-VOC style detection evaluation.
//!
//! Detections of one class are sorted by descending score and greedily
//! matched to the unmatched ground-truth box of the same image with the
//! highest IoU. AP is the all-points interpolated area under the
//! precision/recall staircase (VOC 2010 onwards).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::geom::iou;
use crate::model::{Detection, GroundTruthObject};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub image_id: String,
    pub class_name: String,
    /// Index into that image's detection list.
    pub detection_index: usize,
    pub score: f64,
    pub outcome: Outcome,
}

impl MatchResult {
    pub fn is_true_positive(&self) -> bool {
        self.outcome == Outcome::TruePositive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_name: String,
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub num_ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Per-class AP in vocabulary order; `None` when the class has no
    /// ground truth.
    pub per_class: Vec<(String, Option<f64>)>,
    pub mean_ap: f64,
}

impl ApResult {
    pub fn class_ap(&self, class_name: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|(c, _)| c == class_name)
            .and_then(|(_, ap)| *ap)
    }
}

// Descending score, then image id, then index within the image.
fn rank_order(a: (f64, &str, usize), b: (f64, &str, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.cmp(b.1))
        .then_with(|| a.2.cmp(&b.2))
}

/// Greedy matching of one class's detections against ground truth.
pub fn match_detections(
    detections: &BTreeMap<String, Vec<Detection>>,
    ground_truth: &BTreeMap<String, Vec<GroundTruthObject>>,
    class_name: &str,
    iou_threshold: f64,
) -> Result<Vec<MatchResult>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(validation!("IoU threshold {iou_threshold} outside (0, 1]"));
    }
    if let Some(id) = detections.keys().find(|id| !ground_truth.contains_key(*id)) {
        return Err(validation!("detections for image {id} which has no ground-truth entry"));
    }

    let mut candidates: Vec<(&str, usize, &Detection)> = detections
        .iter()
        .flat_map(|(id, dets)| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.class_name == class_name)
                .map(move |(i, d)| (id.as_str(), i, d))
        })
        .collect();
    candidates.sort_by(|a, b| rank_order((a.2.score(), a.0, a.1), (b.2.score(), b.0, b.1)));

    let mut taken: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut out = Vec::with_capacity(candidates.len());
    for (image_id, index, det) in candidates {
        let gts = &ground_truth[image_id];
        let used = taken
            .entry(image_id)
            .or_insert_with(|| vec![false; gts.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class_name != class_name {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        let outcome = match best {
            Some((g, overlap)) if overlap >= iou_threshold => {
                used[g] = true;
                Outcome::TruePositive
            }
            _ => Outcome::FalsePositive,
        };
        out.push(MatchResult {
            image_id: image_id.into(),
            class_name: class_name.into(),
            detection_index: index,
            score: det.score(),
            outcome,
        });
    }
    Ok(out)
}

fn ranked(matches: &[MatchResult]) -> Vec<&MatchResult> {
    let mut sorted: Vec<&MatchResult> = matches.iter().collect();
    sorted.sort_by(|a, b| {
        rank_order(
            (a.score, &a.image_id, a.detection_index),
            (b.score, &b.image_id, b.detection_index),
        )
    });
    sorted
}

/// Precision/recall after each ranked detection.
pub fn pr_curve(
    matches: &[MatchResult],
    num_ground_truth: usize,
    class_name: &str,
) -> Result<PrCurve> {
    let tp_total = matches.iter().filter(|m| m.is_true_positive()).count();
    if tp_total > num_ground_truth {
        return Err(validation!(
            "{tp_total} true positives but only {num_ground_truth} ground-truth objects"
        ));
    }
    let mut tp = 0usize;
    let points = ranked(matches)
        .into_iter()
        .enumerate()
        .map(|(rank, m)| {
            if m.is_true_positive() {
                tp += 1;
            }
            let recall = if num_ground_truth == 0 {
                0.0
            } else {
                tp as f64 / num_ground_truth as f64
            };
            (recall, tp as f64 / (rank + 1) as f64)
        })
        .collect();
    Ok(PrCurve {
        class_name: class_name.into(),
        points,
        num_ground_truth,
    })
}

/// All-points interpolated average precision. Zero when there is no
/// ground truth; callers treat that class as undefined.
pub fn average_precision(matches: &[MatchResult], num_ground_truth: usize) -> Result<f64> {
    let curve = pr_curve(matches, num_ground_truth, "")?;
    Ok(area_under(&curve.points, num_ground_truth))
}

fn area_under(points: &[(f64, f64)], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return 0.0;
    }
    // precision envelope: max precision at any later rank
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        running = running.max(p);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Per-class AP over the vocabulary and their mean over classes that have
/// ground truth.
pub fn mean_ap(
    detections: &BTreeMap<String, Vec<Detection>>,
    ground_truth: &BTreeMap<String, Vec<GroundTruthObject>>,
    vocabulary: &[String],
) -> Result<ApResult> {
    if vocabulary.is_empty() {
        return Err(validation!("empty class vocabulary"));
    }
    if let Some(d) = detections
        .values()
        .flatten()
        .find(|d| !vocabulary.contains(&d.class_name))
    {
        return Err(validation!("detected class {:?} is not in the vocabulary", d.class_name));
    }
    let mut per_class = Vec::with_capacity(vocabulary.len());
    let mut sum = 0.0;
    let mut defined = 0usize;
    for class in vocabulary {
        let num_gt = ground_truth
            .values()
            .flatten()
            .filter(|g| &g.class_name == class)
            .count();
        if num_gt == 0 {
            per_class.push((class.clone(), None));
            continue;
        }
        let matches = match_detections(detections, ground_truth, class, DEFAULT_IOU_THRESHOLD)?;
        let ap = average_precision(&matches, num_gt)?;
        sum += ap;
        defined += 1;
        per_class.push((class.clone(), Some(ap)));
    }
    let mean_ap = if defined == 0 { 0.0 } else { sum / defined as f64 };
    Ok(ApResult { per_class, mean_ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BoundingBox;
    use alloc::string::ToString;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn gt(b: BoundingBox) -> GroundTruthObject {
        GroundTruthObject::new("car", b).unwrap()
    }

    fn det(b: BoundingBox, s: f64) -> Detection {
        Detection::new("car", b, s).unwrap()
    }

    fn seq(outcomes: &[bool]) -> Vec<MatchResult> {
        let n = outcomes.len();
        outcomes
            .iter()
            .enumerate()
            .map(|(i, &tp)| MatchResult {
                image_id: "img".into(),
                class_name: "car".into(),
                detection_index: i,
                score: (n - i) as f64 / (n + 1) as f64,
                outcome: if tp { Outcome::TruePositive } else { Outcome::FalsePositive },
            })
            .collect()
    }

    fn one_image<T>(v: Vec<T>) -> BTreeMap<String, Vec<T>> {
        let mut m = BTreeMap::new();
        m.insert("img".to_string(), v);
        m
    }

    #[test]
    fn single_perfect_match() {
        let b = bx(10.0, 10.0, 20.0, 20.0);
        let m = match_detections(&one_image(vec![det(b, 0.9)]), &one_image(vec![gt(b)]), "car", 0.5)
            .unwrap();
        assert_eq!(m.len(), 1);
        assert!(m[0].is_true_positive());
    }

    #[test]
    fn one_credit_per_ground_truth() {
        let b = bx(10.0, 10.0, 20.0, 20.0);
        let dets = one_image(vec![det(b, 0.8), det(b, 0.9)]);
        let m = match_detections(&dets, &one_image(vec![gt(b)]), "car", 0.5).unwrap();
        assert_eq!(m[0].detection_index, 1);
        assert!(m[0].is_true_positive());
        assert_eq!(m[1].outcome, Outcome::FalsePositive);
    }

    #[test]
    fn best_overlap_wins() {
        // detection (0,0,10,10); g1 = (0,0,10,6) has IoU 0.6, g2 = (0,0,10,7) has IoU 0.7
        let gts = one_image(vec![gt(bx(0.0, 0.0, 10.0, 6.0)), gt(bx(0.0, 0.0, 10.0, 7.0))]);
        let dets = one_image(vec![det(bx(0.0, 0.0, 10.0, 10.0), 0.9)]);
        assert!((iou(&dets["img"][0].bbox, &gts["img"][0].bbox) - 0.6).abs() < 1e-12);
        let m = match_detections(&dets, &gts, "car", 0.5).unwrap();
        assert!(m[0].is_true_positive());
        // the 0.6 box is still free for a second detection
        let dets2 = one_image(vec![
            det(bx(0.0, 0.0, 10.0, 10.0), 0.9),
            det(bx(0.0, 0.0, 10.0, 6.0), 0.5),
        ]);
        let m = match_detections(&dets2, &gts, "car", 0.5).unwrap();
        assert!(m.iter().all(MatchResult::is_true_positive));
    }

    #[test]
    fn threshold_is_inclusive() {
        // IoU exactly 0.5: (0,0,2,1) inside (0,0,2,2)
        let gts = one_image(vec![gt(bx(0.0, 0.0, 2.0, 2.0))]);
        let dets = one_image(vec![det(bx(0.0, 0.0, 2.0, 1.0), 0.9)]);
        let m = match_detections(&dets, &gts, "car", 0.5).unwrap();
        assert!(m[0].is_true_positive());
    }

    #[test]
    fn class_mismatch_is_false_positive() {
        let b = bx(0.0, 0.0, 5.0, 5.0);
        let gts = one_image(vec![GroundTruthObject::new("bus", b).unwrap()]);
        let m = match_detections(&one_image(vec![det(b, 0.9)]), &gts, "car", 0.5).unwrap();
        assert_eq!(m[0].outcome, Outcome::FalsePositive);
    }

    #[test]
    fn invalid_threshold() {
        let (d, g) = (BTreeMap::new(), BTreeMap::new());
        assert!(match_detections(&d, &g, "car", 0.0).is_err());
        assert!(match_detections(&d, &g, "car", 1.5).is_err());
        assert!(match_detections(&d, &g, "car", 1.0).is_ok());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&seq(&[true]), 1).unwrap(), 1.0);
        assert_eq!(average_precision(&seq(&[false, true]), 1).unwrap(), 0.5);
        let ap = average_precision(&seq(&[true, false, true]), 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], 0).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
    }

    #[test]
    fn ap_rejects_more_hits_than_objects() {
        assert!(average_precision(&seq(&[true, true]), 1).is_err());
    }

    #[test]
    fn recall_is_monotone_along_curve() {
        let c = pr_curve(&seq(&[false, true, true, false, true]), 4, "car").unwrap();
        assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0));
        assert_eq!(c.points.last().unwrap().0, 0.75);
    }

    #[test]
    fn mean_ap_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let vocab = ["bus".to_string(), "car".to_string()];
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), vec![gt(b), GroundTruthObject::new("bus", b).unwrap()]);
        let mut dets = BTreeMap::new();
        dets.insert("a".to_string(), vec![det(b, 0.9), Detection::new("bus", b, 0.7).unwrap()]);
        let r = mean_ap(&dets, &gts, &vocab).unwrap();
        assert_eq!(r.mean_ap, 1.0);

        // bus has no ground truth: undefined and excluded
        let mut gts2 = BTreeMap::new();
        gts2.insert("a".to_string(), vec![gt(b)]);
        let mut dets2 = BTreeMap::new();
        dets2.insert("a".to_string(), vec![det(b, 0.9)]);
        let r = mean_ap(&dets2, &gts2, &vocab).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.per_class[0], ("bus".to_string(), None));

        assert!(mean_ap(&dets2, &gts2, &[]).is_err());
        let r = mean_ap(&BTreeMap::new(), &gts2, &vocab).unwrap();
        assert_eq!(r.class_ap("car"), Some(0.0));
    }

    #[test]
    fn mean_of_half_and_five_sixths() {
        // car: [FP, TP] over 1 GT -> 0.5; bus: [TP, FP, TP] over 2 GT -> 5/6
        let vocab = ["car".to_string(), "bus".to_string()];
        let g = |c: &str, x: f64| GroundTruthObject::new(c, bx(x, 0.0, 10.0, 10.0)).unwrap();
        let d = |c: &str, x: f64, s: f64| Detection::new(c, bx(x, 0.0, 10.0, 10.0), s).unwrap();
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), vec![g("car", 0.0), g("bus", 100.0), g("bus", 200.0)]);
        let mut dets = BTreeMap::new();
        dets.insert(
            "a".to_string(),
            vec![
                d("car", 50.0, 0.9),
                d("car", 0.0, 0.8),
                d("bus", 100.0, 0.9),
                d("bus", 300.0, 0.8),
                d("bus", 200.0, 0.7),
            ],
        );
        let r = mean_ap(&dets, &gts, &vocab).unwrap();
        assert_eq!(r.class_ap("car"), Some(0.5));
        assert!((r.class_ap("bus").unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.mean_ap - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_class_rejected() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let mut dets = BTreeMap::new();
        dets.insert("a".to_string(), vec![Detection::new("truck", b, 0.5).unwrap()]);
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), vec![]);
        assert!(mean_ap(&dets, &gts, &["car".to_string()]).is_err());
    }
}
