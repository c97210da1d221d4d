//! Superposition check for the bias-free top-down pyramid: every `P_l` must
//! be a linear map of `{C_l..C_5}` alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TopDownFpn, LEVELS};
use crate::autograd::Tape;
use crate::backbone::{BackboneFeatures, BackboneSpec};
use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearityReport {
    pub trials: usize,
    /// `max ‖P(aA + bB) − aP(A) − bP(B)‖∞` over trials.
    pub residual: f64,
    /// Largest change of `P_l` when only finer features `C_k, k < l` change.
    pub lower_level_leak: f64,
}

/// Copy of `params` with every `.bias` under `prefix` set to zero.
pub fn with_zero_biases(params: &ParamSet, prefix: &str) -> ParamSet {
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        if name.starts_with(prefix) && name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

fn eval(fpn: &TopDownFpn, params: &ParamSet, feats: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let c: Vec<_> = feats.iter().map(|t| tape.constant(t.clone())).collect();
    let bf = BackboneFeatures {
        c: [c[0], c[1], c[2], c[3]],
    };
    let pyr = fpn.forward(&mut tape, params, &bf)?;
    LEVELS
        .iter()
        .map(|&l| Ok(tape.value(pyr.level(l)?).clone()))
        .collect()
}

fn combine(a: &[Tensor], b: &[Tensor], sa: f64, sb: f64) -> Vec<Tensor> {
    a.iter()
        .zip(b)
        .map(|(x, y)| Tensor::from_fn(x.shape().to_vec(), |i| sa * x.data()[i] + sb * y.data()[i]))
        .collect()
}

fn random_features<R: Rng>(spec: &BackboneSpec, batch: usize, rng: &mut R) -> Vec<Tensor> {
    LEVELS
        .iter()
        .map(|&l| {
            Tensor::randn(
                [batch, spec.channels_of(l), spec.size_of(l), spec.size_of(l)],
                1.0,
                rng,
            )
        })
        .collect()
}

/// `‖P(aA + bB) − aP(A) − bP(B)‖∞` for backbone feature sets `A`, `B`.
pub fn superposition_residual(
    fpn: &TopDownFpn,
    params: &ParamSet,
    a_feats: &[Tensor],
    b_feats: &[Tensor],
    a: f64,
    b: f64,
) -> Result<f64> {
    let mixed = eval(fpn, params, &combine(a_feats, b_feats, a, b))?;
    let pa = eval(fpn, params, a_feats)?;
    let pb = eval(fpn, params, b_feats)?;
    let lin = combine(&pa, &pb, a, b);
    Ok(mixed
        .iter()
        .zip(&lin)
        .fold(0.0, |m, (x, y)| m.max(x.max_abs_diff(y))))
}

/// Runs `trials` random superposition and locality checks. The caller decides
/// whether biases are zeroed (see [`with_zero_biases`]).
pub fn verify_linear_expansion(
    fpn: &TopDownFpn,
    params: &ParamSet,
    spec: &BackboneSpec,
    trials: usize,
    seed: u64,
) -> Result<LinearityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = 0.0f64;
    let mut leak = 0.0f64;
    for _ in 0..trials {
        let a_feats = random_features(spec, 1, &mut rng);
        let b_feats = random_features(spec, 1, &mut rng);
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(-2.0..2.0);
        residual = residual.max(superposition_residual(
            fpn, params, &a_feats, &b_feats, a, b,
        )?);

        let base = eval(fpn, params, &a_feats)?;
        for k in 0..3 {
            let mut perturbed = a_feats.clone();
            perturbed[k] = Tensor::randn(a_feats[k].shape().to_vec(), 1.0, &mut rng);
            let out = eval(fpn, params, &perturbed)?;
            for l in (k + 1)..4 {
                leak = leak.max(out[l].max_abs_diff(&base[l]));
            }
        }
    }
    Ok(LinearityReport {
        trials,
        residual,
        lower_level_leak: leak,
    })
}
