use serde::{Deserialize, Serialize};

use crate::autograd::{CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::heads::targets::LevelTargets;
use crate::tensor::{dims4, Tensor};

/// Focusing exponent and positive-class balance of the focal loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Per-level classification, regression, and `cls + λ·reg` losses.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub cls: Var,
    pub reg: Var,
    pub combined: Var,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and derivative w.r.t. the logit for one binary prediction.
fn focal_term(x: f64, positive: bool, p: &FocalParams) -> (f64, f64) {
    let prob = sigmoid(x);
    let q = sigmoid(-x);
    if positive {
        let log_p = -softplus(-x);
        let mod_ = q.powf(p.gamma);
        let loss = -p.alpha * mod_ * log_p;
        let grad = p.alpha * mod_ * (p.gamma * prob * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let mod_ = prob.powf(p.gamma);
        let loss = -(1.0 - p.alpha) * mod_ * log_q;
        let grad = (1.0 - p.alpha) * mod_ * (prob - p.gamma * q * log_q);
        (loss, grad)
    }
}

struct FocalRule {
    grad: Vec<f64>,
}

impl CustomBackward for FocalRule {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad_out[0];
        vec![Some(self.grad.iter().map(|d| d * g).collect())]
    }
}

fn check_grid(
    op: &'static str,
    tape: &Tape,
    v: Var,
    channels: Option<usize>,
    t: &LevelTargets,
) -> Result<usize> {
    let (n, c, h, w) = dims4(tape.shape(v))?;
    let expected_c = channels.unwrap_or(c);
    if n != t.batch || h != t.height || w != t.width || c != expected_c {
        return Err(Error::shape(
            op,
            tape.shape(v),
            &[t.batch, expected_c, t.height, t.width],
        ));
    }
    Ok(c)
}

/// Sigmoid focal loss over every cell and class, divided by `normalizer`.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &LevelTargets,
    params: &FocalParams,
    normalizer: f64,
) -> Result<Var> {
    let k = check_grid("focal_loss", tape, logits, None, targets)?;
    if normalizer <= 0.0 {
        return Err(Error::invalid("focal_loss", "normalizer must be positive"));
    }
    let hw = targets.height * targets.width;
    let x = tape.value(logits).data();
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for n in 0..targets.batch {
        for c in 0..k {
            let base = (n * k + c) * hw;
            for i in 0..hw {
                let label = targets.labels[n * hw + i];
                if let Some(cls) = label {
                    if cls >= k {
                        return Err(Error::invalid(
                            "focal_loss",
                            format!("class {cls} out of range for {k} logits"),
                        ));
                    }
                }
                let (l, d) = focal_term(x[base + i], label == Some(c), params);
                total += l;
                grad[base + i] = d / normalizer;
            }
        }
    }
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(total / normalizer),
        Box::new(FocalRule { grad }),
    ))
}

/// IoU of two boxes sharing an anchor point, given as (l, t, r, b) distances,
/// and its gradient w.r.t. the predicted distances. At exact ties the
/// symmetric subgradient is used, so a perfect prediction has zero gradient.
fn iou_and_grad(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [gl, gt, gr, gb] = target;
    let ap = (l + r) * (t + b);
    let at = (gl + gr) * (gt + gb);
    let wi = l.min(gl) + r.min(gr);
    let hi = t.min(gt) + b.min(gb);
    let inter = wi * hi;
    let union = ap + at - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_ap = -inter / (union * union);
    let ind = |p: f64, g: f64| {
        if p < g {
            1.0
        } else if p == g {
            0.5
        } else {
            0.0
        }
    };
    let grad = [
        d_inter * hi * ind(l, gl) + d_ap * (t + b),
        d_inter * wi * ind(t, gt) + d_ap * (l + r),
        d_inter * hi * ind(r, gr) + d_ap * (t + b),
        d_inter * wi * ind(b, gb) + d_ap * (l + r),
    ];
    (iou, grad)
}

struct IouRule {
    grad: Vec<f64>,
}

impl CustomBackward for IouRule {
    fn name(&self) -> &'static str {
        "iou_loss"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad_out[0];
        vec![Some(self.grad.iter().map(|d| d * g).collect())]
    }
}

/// `Σ (1 − IoU)` over positive cells divided by `normalizer`. Predictions are
/// distances in units of the level stride.
pub fn iou_loss(
    tape: &mut Tape,
    distances: Var,
    targets: &LevelTargets,
    normalizer: f64,
) -> Result<Var> {
    check_grid("iou_loss", tape, distances, Some(4), targets)?;
    if normalizer <= 0.0 {
        return Err(Error::invalid("iou_loss", "normalizer must be positive"));
    }
    let hw = targets.height * targets.width;
    let x = tape.value(distances).data();
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for n in 0..targets.batch {
        for i in 0..hw {
            let cell = n * hw + i;
            if targets.labels[cell].is_none() {
                continue;
            }
            let idx = |c: usize| (n * 4 + c) * hw + i;
            let pred = [x[idx(0)], x[idx(1)], x[idx(2)], x[idx(3)]];
            let gt = targets.distances[cell].map(|d| d / targets.stride);
            let (iou, g) = iou_and_grad(pred, gt);
            total += 1.0 - iou;
            for c in 0..4 {
                grad[idx(c)] = -g[c] / normalizer;
            }
        }
    }
    Ok(tape.custom(
        &[distances],
        Tensor::scalar(total / normalizer),
        Box::new(IouRule { grad }),
    ))
}

/// Focal classification loss, IoU regression loss, and `cls + λ·reg`, each
/// divided by `normalizer` (the positive count, at least one).
pub fn detection_loss(
    tape: &mut Tape,
    cls: Var,
    reg: Var,
    targets: &LevelTargets,
    lambda: f64,
    focal: &FocalParams,
    normalizer: f64,
) -> Result<LevelLoss> {
    let cls_loss = focal_loss(tape, cls, targets, focal, normalizer)?;
    let reg_loss = iou_loss(tape, reg, targets, normalizer)?;
    let weighted = tape.scale(reg_loss, lambda);
    let combined = tape.add(cls_loss, weighted)?;
    Ok(LevelLoss {
        cls: cls_loss,
        reg: reg_loss,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::grad_check;

    fn one_positive(dist: [f64; 4], stride: f64) -> LevelTargets {
        LevelTargets {
            level: 2,
            stride,
            batch: 1,
            height: 1,
            width: 2,
            labels: vec![Some(1), None],
            distances: vec![dist, [0.0; 4]],
            owners: vec![Some(0), None],
        }
    }

    fn reg_tensor(pred: [f64; 4]) -> Tensor {
        // channel-major N×4×1×2, background cell filled with junk
        Tensor::new(
            [1, 4, 1, 2],
            vec![pred[0], 7.0, pred[1], 7.0, pred[2], 7.0, pred[3], 7.0],
        )
        .unwrap()
    }

    #[test]
    fn shifted_box_with_half_iou() {
        // GT box 4×4 around the anchor; prediction shifted by 4/3 along x:
        // overlap 8/3·4 over union (16 + 16 − 32/3) = 1/2
        let t = one_positive([2.0, 2.0, 2.0, 2.0], 1.0);
        let mut tape = Tape::new();
        let r = tape.leaf(reg_tensor([2.0 / 3.0, 2.0, 10.0 / 3.0, 2.0]), true);
        let l = iou_loss(&mut tape, r, &t, 1.0).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_box_zero_loss_zero_gradient() {
        let t = one_positive([8.0, 4.0, 12.0, 16.0], 4.0);
        let mut tape = Tape::new();
        let r = tape.leaf(reg_tensor([2.0, 1.0, 3.0, 4.0]), true);
        let l = iou_loss(&mut tape, r, &t, 1.0).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let g = tape.backward(l).unwrap().wrt(r).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-15), "{:?}", g.data());
    }

    #[test]
    fn classification_vanishes_with_confident_logits() {
        let t = one_positive([1.0; 4], 1.0);
        let mut prev = f64::INFINITY;
        for m in [2.0, 5.0, 10.0, 20.0, 40.0] {
            // correct class +m at the positive cell, −m elsewhere
            let logits = Tensor::new([1, 2, 1, 2], vec![-m, -m, m, -m]).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(logits);
            let l = focal_loss(&mut tape, x, &t, &FocalParams::default(), 1.0).unwrap();
            let v = tape.value(l).item().unwrap();
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn focal_matches_formula() {
        let t = one_positive([1.0; 4], 1.0);
        let xs = [0.3, -1.2, 0.7, 2.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 1, 2], xs.to_vec()).unwrap());
        let l = focal_loss(&mut tape, x, &t, &FocalParams::default(), 2.0).unwrap();
        let v = tape.value(l).item().unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let neg = |z: f64| -0.75 * s(z).powi(2) * (1.0 - s(z)).ln();
        let pos = |z: f64| -0.25 * (1.0 - s(z)).powi(2) * s(z).ln();
        // class 0 is background everywhere; class 1 positive at cell 0
        let expect = (neg(xs[0]) + neg(xs[1]) + pos(xs[2]) + neg(xs[3])) / 2.0;
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = one_positive([3.0, 1.0, 2.0, 5.0], 2.0);
        let inputs = [
            Tensor::new([1, 2, 1, 2], vec![0.3, -1.2, 0.7, 2.0]).unwrap(),
            reg_tensor([1.1, 0.3, 0.8, 2.9]),
        ];
        let r = grad_check(
            |tape, v| {
                let l = detection_loss(tape, v[0], v[1], &t, 1.5, &FocalParams::default(), 1.0)?;
                Ok(l.combined)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn lambda_zero_is_classification_only() {
        let t = one_positive([1.0; 4], 1.0);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_fn([1, 2, 1, 2], |i| i as f64 - 1.5));
        let r = tape.constant(reg_tensor([0.2, 3.0, 1.0, 0.1]));
        let l = detection_loss(&mut tape, c, r, &t, 0.0, &FocalParams::default(), 1.0).unwrap();
        assert_eq!(
            tape.value(l.combined).item().unwrap(),
            tape.value(l.cls).item().unwrap()
        );
        assert!(tape.value(l.reg).item().unwrap() > 0.0);
    }

    #[test]
    fn no_positives_background_only() {
        let mut t = one_positive([1.0; 4], 1.0);
        t.labels = vec![None, None];
        t.owners = vec![None, None];
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros([1, 2, 1, 2]));
        let r = tape.constant(reg_tensor([1.0; 4]));
        let l = detection_loss(&mut tape, c, r, &t, 1.0, &FocalParams::default(), 1.0).unwrap();
        assert_eq!(tape.value(l.reg).item().unwrap(), 0.0);
        // four background terms at p = 1/2
        let expect = 4.0 * 0.75 * 0.25 * 2f64.ln();
        assert!((tape.value(l.cls).item().unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let t = one_positive([1.0; 4], 1.0);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        let r = tape.constant(Tensor::ones([1, 3, 1, 2]));
        assert!(focal_loss(&mut tape, c, &t, &FocalParams::default(), 1.0).is_err());
        assert!(iou_loss(&mut tape, r, &t, 1.0).is_err());
    }
}
