//! Inference post-processing: score filtering, per-level top-k, box decoding,
//! and class-wise non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub per_level_topk: usize,
    pub nms_iou: f64,
    pub max_total: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_thresh: 0.05,
            per_level_topk: 1000,
            nms_iou: 0.5,
            max_total: 100,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_thresh) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0)
        {
            return Err(Error::Config(
                "decode: score_thresh must be in [0, 1) and nms_iou in (0, 1]".into(),
            ));
        }
        if self.per_level_topk == 0 || self.max_total == 0 {
            return Err(Error::Config(
                "decode: top-k limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Head outputs of one level as plain tensors: `N×K×h×w` logits and
/// `N×4×h×w` side distances in stride units.
#[derive(Clone, Debug)]
pub struct LevelMaps {
    pub level: usize,
    pub cls: Tensor,
    pub reg: Tensor,
}

/// Descending score; ties broken by class, then level, then position.
fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class.cmp(&b.class))
        .then(a.level.cmp(&b.level))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Greedy class-wise suppression; input order does not matter.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decodes one image (`n`) of every level into at most `max_total` detections
/// sorted by descending score.
pub fn decode_image(
    levels: &[LevelMaps],
    n: usize,
    image_size: f64,
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for lm in levels {
        let (batch, k, h, w) = dims4(lm.cls.shape())?;
        if lm.reg.shape() != [batch, 4, h, w] {
            return Err(Error::shape(
                "decode_predictions",
                lm.reg.shape(),
                &[batch, 4, h, w],
            ));
        }
        if n >= batch {
            return Err(Error::invalid(
                "decode_predictions",
                format!("image {n} outside batch of {batch}"),
            ));
        }
        let stride = (1u64 << lm.level) as f64;
        let hw = h * w;
        let cls = lm.cls.data();
        let reg = lm.reg.data();
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for c in 0..k {
            let base = (n * k + c) * hw;
            for i in 0..hw {
                let s = sigmoid(cls[base + i]);
                if s >= params.score_thresh {
                    cands.push((s, c, i));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(params.per_level_topk);
        for (score, class, i) in cands {
            let (y, x) = (i / w, i % w);
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            let d = |c: usize| reg[(n * 4 + c) * hw + i] * stride;
            let bbox = BBox::new(
                (cx - d(0)).max(0.0),
                (cy - d(1)).max(0.0),
                (cx + d(2)).min(image_size),
                (cy + d(3)).min(image_size),
            );
            if bbox.width() > 0.0 && bbox.height() > 0.0 {
                all.push(Detection {
                    bbox,
                    class,
                    score,
                    level: lm.level,
                });
            }
        }
    }
    let mut kept = nms(all, params.nms_iou);
    kept.truncate(params.max_total);
    Ok(kept)
}

/// Decodes every image of the batch.
pub fn decode_predictions(
    levels: &[LevelMaps],
    image_size: f64,
    params: &DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    params.validate()?;
    let batch = match levels.first() {
        Some(l) => dims4(l.cls.shape())?.0,
        None => return Ok(Vec::new()),
    };
    (0..batch)
        .map(|n| decode_image(levels, n, image_size, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, x2: f64, score: f64, class: usize) -> Detection {
        Detection {
            bbox: BBox::new(x1, 0.0, x2, 10.0),
            class,
            score,
            level: 2,
        }
    }

    #[test]
    fn duplicate_box_suppressed() {
        let kept = nms(vec![det(0.0, 10.0, 0.8, 0), det(0.0, 10.0, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn low_overlap_both_kept() {
        // 10×10 boxes overlapping by o columns: 10·o / (200 − 10·o) = 0.4 at o = 40/7
        let shift = 10.0 - 40.0 / 7.0;
        let a = det(0.0, 10.0, 0.9, 0);
        let b = det(shift, shift + 10.0, 0.8, 0);
        assert!((a.bbox.iou(&b.bbox) - 0.4).abs() < 1e-12);
        assert_eq!(nms(vec![a, b], 0.5).len(), 2);
    }

    #[test]
    fn different_classes_not_suppressed() {
        assert_eq!(
            nms(vec![det(0.0, 10.0, 0.9, 0), det(0.0, 10.0, 0.8, 1)], 0.5).len(),
            2
        );
    }

    #[test]
    fn very_negative_logits_decode_to_nothing() {
        let lm = LevelMaps {
            level: 3,
            cls: Tensor::full([1, 3, 8, 8], f64::NEG_INFINITY),
            reg: Tensor::ones([1, 4, 8, 8]),
        };
        assert!(decode_predictions(&[lm], 64.0, &DecodeParams::default()).unwrap()[0].is_empty());
    }

    #[test]
    fn single_cell_decodes_to_its_box() {
        let mut cls = Tensor::full([1, 2, 2, 2], -20.0);
        cls.data_mut()[4 + 3] = 3.0; // class 1 at cell (1, 1)
        let mut reg = Tensor::ones([1, 4, 2, 2]);
        reg.data_mut()[2 * 4 + 3] = 0.25; // right side
        let lm = LevelMaps { level: 4, cls, reg };
        let d = &decode_predictions(&[lm], 64.0, &DecodeParams::default()).unwrap()[0];
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, 1);
        assert_eq!(d[0].bbox, BBox::new(8.0, 8.0, 28.0, 40.0));
        assert!((d[0].score - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn limits_respected() {
        let cls = Tensor::from_fn([1, 3, 8, 8], |i| (i as f64 * 0.37).sin() * 4.0);
        let reg = Tensor::from_fn([1, 4, 8, 8], |i| 0.2 + (i % 7) as f64 * 0.1);
        let lm = LevelMaps { level: 3, cls, reg };
        let p = DecodeParams {
            max_total: 5,
            ..DecodeParams::default()
        };
        let d = &decode_predictions(&[lm], 64.0, &p).unwrap()[0];
        assert!(d.len() <= 5);
        assert!(d.iter().all(|x| x.score >= p.score_thresh));
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
