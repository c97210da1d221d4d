//! Average precision with greedy score-ordered matching, 101-point
//! interpolation, and size-binned variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::GtObject;
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::scene::SizeBin;

/// Outcome of one detection after matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchKind {
    TruePositive,
    FalsePositive,
    /// Matched an out-of-bin ground truth, or unmatched and itself out of bin.
    Ignored,
}

/// AP values at one or more IoU thresholds (averaged).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub overall: f64,
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
    /// Keyed by class id; classes without ground truth are absent.
    pub per_class: BTreeMap<usize, f64>,
}

/// Matches one image's detections of one class against its ground truths.
///
/// Detections are visited by descending score (ties keep input order). Each
/// takes the unmatched in-bin ground truth of highest IoU at or above the
/// threshold, falling back to an out-of-bin one.
pub fn match_image(
    dets: &[&Detection],
    gts: &[&GtObject],
    iou_thresh: f64,
    bin: Option<SizeBin>,
) -> Vec<(f64, MatchKind)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let in_bin = |b: &crate::boxes::BBox| bin.is_none_or(|bin| SizeBin::of(b) == bin);
    let mut taken = vec![false; gts.len()];
    let mut out = vec![(0.0, MatchKind::FalsePositive); dets.len()];
    for &di in &order {
        let d = dets[di];
        let mut best: Option<(bool, f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou < iou_thresh {
                continue;
            }
            let cand = (in_bin(&g.bbox), iou, gi);
            let better = match best {
                None => true,
                Some((bi, biou, _)) => (cand.0 && !bi) || (cand.0 == bi && iou > biou),
            };
            if better {
                best = Some(cand);
            }
        }
        let kind = match best {
            Some((ok, _, gi)) => {
                taken[gi] = true;
                if ok {
                    MatchKind::TruePositive
                } else {
                    MatchKind::Ignored
                }
            }
            None if in_bin(&d.bbox) => MatchKind::FalsePositive,
            None => MatchKind::Ignored,
        };
        out[di] = (d.score, kind);
    }
    out
}

/// Area under the 101-point interpolated precision/recall curve of results
/// ordered by descending score.
pub fn interpolated_ap(ranked: &[MatchKind], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for k in ranked {
        match k {
            MatchKind::TruePositive => tp += 1,
            MatchKind::FalsePositive => fp += 1,
            MatchKind::Ignored => continue,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope, non-increasing in recall
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class, or `None` without (in-bin) ground truth.
pub fn class_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtObject>],
    class: usize,
    iou_thresh: f64,
    bin: Option<SizeBin>,
) -> Option<f64> {
    let mut num_gt = 0;
    let mut scored: Vec<(f64, usize, usize, MatchKind)> = Vec::new();
    for (img, (dets, gts)) in detections.iter().zip(ground_truth).enumerate() {
        let d: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        let g: Vec<&GtObject> = gts.iter().filter(|g| g.class == class).collect();
        num_gt += g
            .iter()
            .filter(|g| bin.is_none_or(|b| SizeBin::of(&g.bbox) == b))
            .count();
        for (i, (score, kind)) in match_image(&d, &g, iou_thresh, bin).into_iter().enumerate() {
            scored.push((score, img, i, kind));
        }
    }
    if num_gt == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let ranked: Vec<MatchKind> = scored.into_iter().map(|s| s.3).collect();
    Some(interpolated_ap(&ranked, num_gt))
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Mean-over-classes AP, overall and per size bin, averaged over
/// `iou_thresholds`. Classes without ground truth do not contribute.
pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtObject>],
    num_classes: usize,
    iou_thresholds: &[f64],
) -> Result<ApSummary> {
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(
            "evaluate_ap",
            format!(
                "{} detection lists for {} images",
                detections.len(),
                ground_truth.len()
            ),
        ));
    }
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::invalid(
            "evaluate_ap",
            "IoU thresholds must lie in (0, 1)",
        ));
    }
    let bins = [
        None,
        Some(SizeBin::Small),
        Some(SizeBin::Medium),
        Some(SizeBin::Large),
    ];
    let mut per_bin: Vec<Option<f64>> = Vec::with_capacity(4);
    let mut per_class = BTreeMap::new();
    for bin in bins {
        let mut class_means = Vec::new();
        for c in 0..num_classes {
            let aps: Vec<f64> = iou_thresholds
                .iter()
                .filter_map(|&t| class_ap(detections, ground_truth, c, t, bin))
                .collect();
            if let Some(m) = mean(&aps) {
                class_means.push(m);
                if bin.is_none() {
                    per_class.insert(c, m);
                }
            }
        }
        per_bin.push(mean(&class_means));
    }
    Ok(ApSummary {
        overall: per_bin[0].unwrap_or(0.0),
        small: per_bin[1],
        medium: per_bin[2],
        large: per_bin[3],
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn gt(x: f64, side: f64, class: usize) -> GtObject {
        GtObject {
            bbox: BBox::new(x, 0.0, x + side, side),
            class,
        }
    }

    fn det(x: f64, side: f64, class: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + side, side),
            class,
            score,
            level: 3,
        }
    }

    #[test]
    fn perfect_detection() {
        let s = evaluate_ap(
            &[vec![det(0.0, 10.0, 0, 0.9)]],
            &[vec![gt(0.0, 10.0, 0)]],
            3,
            &[0.5],
        )
        .unwrap();
        assert_eq!(s.overall, 1.0);
        assert_eq!(s.medium, Some(1.0));
        assert_eq!(s.small, None);
        assert_eq!(s.per_class.len(), 1);
    }

    #[test]
    fn no_detections() {
        let s = evaluate_ap(&[vec![]], &[vec![gt(0.0, 10.0, 0)]], 3, &[0.5]).unwrap();
        assert_eq!(s.overall, 0.0);
    }

    #[test]
    fn false_positive_ranked_first() {
        let dets = vec![det(40.0, 10.0, 0, 0.9), det(0.0, 10.0, 0, 0.8)];
        let s = evaluate_ap(&[dets], &[vec![gt(0.0, 10.0, 0)]], 1, &[0.5]).unwrap();
        assert_eq!(s.overall, 0.5);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let dets = vec![det(0.0, 10.0, 0, 0.9), det(0.0, 10.0, 0, 0.8)];
        let m = match_image(
            &dets.iter().collect::<Vec<_>>(),
            &[&gt(0.0, 10.0, 0)],
            0.5,
            None,
        );
        assert_eq!(m[0].1, MatchKind::TruePositive);
        assert_eq!(m[1].1, MatchKind::FalsePositive);
    }

    #[test]
    fn out_of_bin_matches_are_ignored() {
        // a large GT matched by a large detection does not affect small AP
        let gts = vec![gt(0.0, 40.0, 0), gt(50.0, 6.0, 0)];
        let dets = vec![det(0.0, 40.0, 0, 0.95), det(50.0, 6.0, 0, 0.9)];
        let s = evaluate_ap(&[dets], &[gts], 1, &[0.5]).unwrap();
        assert_eq!(s.small, Some(1.0));
        assert_eq!(s.large, Some(1.0));
        assert_eq!(s.medium, None);
    }

    #[test]
    fn classes_without_ground_truth_excluded() {
        let dets = vec![det(0.0, 10.0, 0, 0.9), det(20.0, 10.0, 2, 0.9)];
        let s = evaluate_ap(&[dets], &[vec![gt(0.0, 10.0, 0)]], 3, &[0.5]).unwrap();
        assert_eq!(s.overall, 1.0);
        assert!(!s.per_class.contains_key(&2));
    }

    #[test]
    fn threshold_list_averaged() {
        // IoU of the detection is 0.6: a match at 0.5, a miss at 0.7
        let d = Detection {
            bbox: BBox::new(0.0, 0.0, 10.0, 6.0),
            class: 0,
            score: 0.9,
            level: 3,
        };
        let s = evaluate_ap(&[vec![d]], &[vec![gt(0.0, 10.0, 0)]], 1, &[0.5, 0.7]).unwrap();
        assert_eq!(s.overall, 0.5);
    }

    #[test]
    fn invalid_inputs() {
        assert!(evaluate_ap(&[vec![]], &[], 1, &[0.5]).is_err());
        assert!(evaluate_ap(&[vec![]], &[vec![]], 1, &[1.0]).is_err());
    }
}
