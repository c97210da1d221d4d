//! Finite-difference verification of every differentiable op and of the
//! composite modules, on freshly randomized instances.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::gradcheck::{
    grad_check_at, grad_check_params, sample_param_coords, GradCheckReport,
};
use crate::autograd::{EwKind, Tape, UpsampleMode, Var};
use crate::backbone::{init_backbone, BackboneFeatures, BackboneSpec};
use crate::boxes::{BBox, GtObject};
use crate::error::Result;
use crate::heads::{
    assign_targets, detection_loss, uncertainty_alpha, uncertainty_wrap, FocalParams, Head,
    LevelRanges, LossMode, UncertaintyHead,
};
use crate::model::{Detector, ModelConfig};
use crate::params::{Initializer, ParamSet};
use crate::pyramid::{Builder, Neck, PyramidConfig};
use crate::tensor::Tensor;

/// Largest acceptable relative error of any checked coordinate.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per input (ops) or per parameter (composites).
    pub coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 20,
            seed: 0,
            step: 1e-6,
            coords: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub trials: usize,
    pub coords_checked: usize,
    /// Coordinates whose slope was re-measured next to a ReLU kink.
    pub kinks: usize,
    pub max_rel_error: f64,
}

type Case = fn(&mut ChaCha8Rng, &SuiteOptions) -> Result<GradCheckReport>;

/// Every case of the suite, ops first, then composites.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r, o| binary(r, o, EwKind::Add)),
        ("sub", |r, o| binary(r, o, EwKind::Sub)),
        ("mul", |r, o| binary(r, o, EwKind::Mul)),
        ("scalar-mul", |r, o| unary(r, o, EwKind::ScalarMul(-1.7))),
        ("exp", |r, o| unary(r, o, EwKind::Exp)),
        ("neg-exp", |r, o| unary(r, o, EwKind::NegExp)),
        ("relu", |r, o| unary(r, o, EwKind::Relu)),
        ("sigmoid", |r, o| unary(r, o, EwKind::Sigmoid)),
        ("scalar-broadcast", scalar_broadcast),
        ("channel-broadcast", channel_broadcast),
        ("sum-mean", sum_mean),
        ("matmul", matmul),
        ("batched-matmul", batched_matmul),
        ("conv2d-1x1", |r, o| conv(r, o, 1, 1)),
        ("conv2d-3x3", |r, o| conv(r, o, 3, 1)),
        ("conv2d-3x3-stride2", |r, o| conv(r, o, 3, 2)),
        ("group-norm", group_norm),
        ("reshape", reshape),
        ("concat-split", concat_split),
        ("upsample-nearest", |r, o| {
            upsample(r, o, UpsampleMode::Nearest)
        }),
        ("upsample-bilinear", |r, o| {
            upsample(r, o, UpsampleMode::Bilinear)
        }),
        ("adaptive-avg-pool", adaptive_pool),
        ("softmax-rows", softmax_rows),
        ("stop-gradient", stop_gradient),
        ("detection-loss", detection_losses),
        ("backbone", backbone),
        ("builder-fpn", |r, o| builder(r, o, Builder::Fpn, 1)),
        ("builder-fg", |r, o| builder(r, o, Builder::Fg, 1)),
        ("builder-cfg", |r, o| builder(r, o, Builder::Cfg, 2)),
        ("head", head),
        ("uncertainty-wrap", uncertainty),
        ("detector", detector),
    ]
}

/// Runs `options.trials` instances of every case.
pub fn run_gradient_suite(
    options: &SuiteOptions,
    progress: &mut dyn FnMut(&SuiteEntry),
) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (k, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(k as u64);
        let mut entry = SuiteEntry {
            name: name.to_string(),
            trials: 0,
            coords_checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..options.trials {
            let r = case(&mut rng, options)?;
            entry.trials += 1;
            entry.coords_checked += r.coords_checked;
            entry.kinks += r.kinks;
            entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
        }
        progress(&entry);
        out.push(entry);
    }
    Ok(out)
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    ]
}

/// Normal values pushed at least `margin` away from zero.
fn away_from_zero(shape: Vec<usize>, margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| v + margin * v.signum())
}

fn sample_coords(inputs: &[Tensor], per_input: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        if n <= per_input {
            out.extend((0..n).map(|j| (i, j)));
        } else {
            out.extend(sample(rng, n, per_input).into_iter().map(|j| (i, j)));
        }
    }
    out
}

/// Checks `Σ w ⊙ build(inputs)` for a random fixed weighting `w`.
fn check_op<F>(
    rng: &mut ChaCha8Rng,
    o: &SuiteOptions,
    inputs: Vec<Tensor>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let out = build(&mut t, &vs)?;
        t.shape(out).to_vec()
    };
    let w = Tensor::randn(shape, 1.0, rng);
    let coords = sample_coords(&inputs, o.coords, rng);
    grad_check_at(
        |t, v| {
            let out = build(t, v)?;
            let wc = t.constant(w.clone());
            let m = t.mul(out, wc)?;
            Ok(t.sum(m))
        },
        &inputs,
        o.step,
        &coords,
    )
}

fn binary(rng: &mut ChaCha8Rng, o: &SuiteOptions, kind: EwKind) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let inputs = vec![
        Tensor::randn(s.clone(), 1.0, rng),
        Tensor::randn(s, 1.0, rng),
    ];
    check_op(rng, o, inputs, |t, v| t.ew(kind, v[0], Some(v[1])))
}

fn unary(rng: &mut ChaCha8Rng, o: &SuiteOptions, kind: EwKind) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let inputs = vec![away_from_zero(s, 1e-3, rng)];
    check_op(rng, o, inputs, |t, v| t.ew(kind, v[0], None))
}

fn scalar_broadcast(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let inputs = vec![
        Tensor::randn(s, 1.0, rng),
        Tensor::randn(Vec::<usize>::new(), 1.0, rng),
    ];
    check_op(rng, o, inputs, |t, v| {
        let a = t.add(v[0], v[1])?;
        t.mul(a, v[1])
    })
}

fn channel_broadcast(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let g = vec![s[0], 1, s[2], s[3]];
    let inputs = vec![Tensor::randn(s, 1.0, rng), Tensor::randn(g, 1.0, rng)];
    check_op(rng, o, inputs, |t, v| t.mul_channel_broadcast(v[0], v[1]))
}

fn sum_mean(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let inputs = vec![Tensor::randn(s, 1.0, rng)];
    check_op(rng, o, inputs, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let a = t.sum(sq);
        let b = t.mean(v[0]);
        t.mul(a, b)
    })
}

fn matmul(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let (m, k, n) = (
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=64),
    );
    let inputs = vec![
        Tensor::randn([m, k], 1.0, rng),
        Tensor::randn([k, n], 1.0, rng),
    ];
    check_op(rng, o, inputs, |t, v| t.matmul(v[0], v[1]))
}

fn batched_matmul(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let (b, m, k, n) = (
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=16),
    );
    let inputs = vec![
        Tensor::randn([b, m, k], 1.0, rng),
        Tensor::randn([b, k, n], 1.0, rng),
    ];
    check_op(rng, o, inputs, |t, v| t.matmul(v[0], v[1]))
}

fn conv(
    rng: &mut ChaCha8Rng,
    o: &SuiteOptions,
    k: usize,
    stride: usize,
) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let out_c = rng.random_range(1..=8);
    let inputs = vec![
        Tensor::randn(s.clone(), 1.0, rng),
        Tensor::randn([out_c, s[1], k, k], 0.5, rng),
        Tensor::randn([out_c], 0.5, rng),
    ];
    check_op(rng, o, inputs, move |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)
    })
}

fn group_norm(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let mut s = random_shape(rng);
    let groups = rng.random_range(1..=4);
    s[1] = groups * rng.random_range(1..=2);
    if s[2] * s[3] * s[1] / groups < 2 {
        s[2] = 2;
    }
    let c = s[1];
    let inputs = vec![
        Tensor::randn(s, 2.0, rng),
        Tensor::randn([c], 1.0, rng),
        Tensor::randn([c], 1.0, rng),
    ];
    check_op(rng, o, inputs, move |t, v| {
        t.group_norm(v[0], groups, v[1], v[2], 1e-5)
    })
}

fn reshape(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let target = vec![s[0], s[1], s[2] * s[3]];
    let inputs = vec![Tensor::randn(s, 1.0, rng)];
    check_op(rng, o, inputs, move |t, v| {
        let r = t.reshape(v[0], &target)?;
        t.mul(r, r)
    })
}

fn concat_split(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let mut s = random_shape(rng);
    s[1] = 4 * rng.random_range(1..=2);
    let mut s2 = s.clone();
    s2[1] = rng.random_range(1..=4);
    let inputs = vec![Tensor::randn(s, 1.0, rng), Tensor::randn(s2, 1.0, rng)];
    check_op(rng, o, inputs, |t, v| {
        let parts = t.split_channels(v[0], 4)?;
        let sq = t.mul(parts[1], parts[1])?;
        t.concat_channels(&[parts[3], v[1], sq, parts[0]])
    })
}

fn upsample(rng: &mut ChaCha8Rng, o: &SuiteOptions, mode: UpsampleMode) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let factor = rng.random_range(2..=4);
    let inputs = vec![Tensor::randn(s, 1.0, rng)];
    check_op(rng, o, inputs, move |t, v| t.upsample(v[0], factor, mode))
}

fn adaptive_pool(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let (oh, ow) = (rng.random_range(1..=s[2]), rng.random_range(1..=s[3]));
    let inputs = vec![Tensor::randn(s, 1.0, rng)];
    check_op(rng, o, inputs, move |t, v| {
        let p = t.adaptive_avg_pool(v[0], oh, ow)?;
        let g = t.global_avg_pool(v[0])?;
        let a = t.sum(p);
        let b = t.sum(g);
        let prod = t.mul(a, b)?;
        t.add(p, prod)
    })
}

fn softmax_rows(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let (b, r, c) = (
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    );
    let inputs = vec![Tensor::randn([b, r, c], 2.0, rng)];
    check_op(rng, o, inputs, |t, v| t.softmax_rows(v[0]))
}

fn stop_gradient(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let s = random_shape(rng);
    let inputs = vec![Tensor::randn(s, 1.0, rng)];
    // the blocked branch is a constant for the finite differences too
    let frozen = inputs[0].clone();
    check_op(rng, o, inputs, move |t, v| {
        let c = t.constant(frozen.clone());
        let blocked = t.stop_gradient(c);
        let y = t.mul(v[0], v[0])?;
        t.add(y, blocked)
    })
}

fn random_objects(rng: &mut ChaCha8Rng, batch: usize, size: f64) -> Vec<Vec<GtObject>> {
    (0..batch)
        .map(|_| {
            (0..rng.random_range(1..=3))
                .map(|_| {
                    let side = rng.random_range(4.0..size * 0.8);
                    let x = rng.random_range(0.0..size - side);
                    let y = rng.random_range(0.0..size - side);
                    GtObject {
                        bbox: BBox::new(x, y, x + side, y + side * rng.random_range(0.6..1.0)),
                        class: rng.random_range(0..3),
                    }
                })
                .collect()
        })
        .collect()
}

fn detection_losses(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let n = rng.random_range(1..=2);
    let hw = 8;
    let objects = random_objects(rng, n, 32.0);
    let targets = assign_targets(&objects, &[(2, hw, hw)], &LevelRanges::single(2))?;
    let t = targets.levels[0].clone();
    let lambda = rng.random_range(0.5..2.0);
    let inputs = vec![
        Tensor::randn([n, 3, hw, hw], 1.5, rng),
        Tensor::uniform([n, 4, hw, hw], 0.3, 3.0, rng),
    ];
    let coords = sample_coords(&inputs, o.coords * 2, rng);
    let focal = FocalParams::default();
    let norm = t.num_positives().max(1) as f64;
    grad_check_at(
        |tape, v| Ok(detection_loss(tape, v[0], v[1], &t, lambda, &focal, norm)?.combined),
        &inputs,
        o.step,
        &coords,
    )
}

/// Inserts `x` as the pseudo-parameter `input` so that composite checks cover
/// input gradients too.
fn with_input(mut params: ParamSet, x: Tensor) -> Result<ParamSet> {
    params.insert("input", x)?;
    Ok(params)
}

fn weights_for(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| Tensor::randn(s.clone(), 1.0, rng))
        .collect()
}

fn weighted_sum(tape: &mut Tape, outs: &[Var], weights: &[Tensor]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (o, w) in outs.iter().zip(weights) {
        let wc = tape.constant(w.clone());
        let m = tape.mul(*o, wc)?;
        let s = tape.sum(m);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one output"))
}

fn check_composite<F>(
    rng: &mut ChaCha8Rng,
    o: &SuiteOptions,
    params: ParamSet,
    outputs: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Vec<Var>>,
{
    let shapes: Vec<Vec<usize>> = {
        let mut t = Tape::new();
        outputs(&mut t, &params)?
            .iter()
            .map(|v| t.shape(*v).to_vec())
            .collect()
    };
    let weights = weights_for(&shapes, rng);
    let coords = sample_param_coords(&params, o.coords, rng);
    grad_check_params(
        &params,
        |t, p| {
            let outs = outputs(t, p)?;
            weighted_sum(t, &outs, &weights)
        },
        o.step,
        &coords,
    )
}

/// Large enough that `C5` keeps several cells per normalization group; a
/// single-cell group normalizes to exactly `beta`, which sits on a ReLU kink.
fn small_backbone() -> BackboneSpec {
    BackboneSpec {
        stage_channels: vec![4, 4, 8, 8, 8],
        blocks_per_stage: vec![1; 5],
        input_size: 64,
    }
}

fn backbone(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let spec = small_backbone();
    let mut params = ParamSet::new();
    let bb = init_backbone(&spec, &mut params, &mut Initializer::new(rng.random()))?;
    let params = with_input(params, Tensor::randn([1, 3, 64, 64], 1.0, rng))?;
    check_composite(rng, o, params, |t, p| {
        let x = t.param(p, "input")?;
        Ok(bb.forward(t, p, x, false)?.c.to_vec())
    })
}

fn builder(
    rng: &mut ChaCha8Rng,
    o: &SuiteOptions,
    builder: Builder,
    cascade_times: usize,
) -> Result<GradCheckReport> {
    let spec = BackboneSpec {
        stage_channels: vec![4, 4, 8, 8, 4],
        blocks_per_stage: vec![1; 5],
        input_size: 64,
    };
    let config = PyramidConfig {
        builder,
        channels: 8,
        cascade_times,
        ..PyramidConfig::default()
    };
    let mut params = ParamSet::new();
    let neck = Neck::init(
        &config,
        &spec,
        &mut params,
        &mut Initializer::new(rng.random()),
    )?;
    for l in 2..=5 {
        let s = spec.size_of(l);
        params.insert(
            format!("c{l}"),
            Tensor::randn([1, spec.channels_of(l), s, s], 1.0, rng),
        )?;
    }
    check_composite(rng, o, params, |t, p| {
        let c = [
            t.param(p, "c2")?,
            t.param(p, "c3")?,
            t.param(p, "c4")?,
            t.param(p, "c5")?,
        ];
        let set = neck.forward(t, p, &BackboneFeatures { c })?;
        Ok(set.levels().map(|(_, v)| v).collect())
    })
}

fn head(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let mut params = ParamSet::new();
    let h = Head::register(
        &mut params,
        &mut Initializer::new(rng.random()),
        "head",
        6,
        8,
        2,
        3,
    )?;
    let params = with_input(params, Tensor::randn([2, 6, 8, 8], 1.0, rng))?;
    check_composite(rng, o, params, |t, p| {
        let x = t.param(p, "input")?;
        let out = h.forward(t, p, x)?;
        Ok(vec![out.cls, out.reg])
    })
}

fn uncertainty(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let mut params = ParamSet::new();
    let u =
        UncertaintyHead::register(&mut params, &mut Initializer::new(rng.random()), "alpha", 4)?;
    let mut params = with_input(params, Tensor::randn([2, 4, 4, 4], 1.0, rng))?;
    params.insert("loss", Tensor::scalar(rng.random_range(0.1..5.0)))?;
    let tau = rng.random_range(0.01..1.0);
    check_composite(rng, o, params, move |t, p| {
        let x = t.param(p, "input")?;
        let l = t.param(p, "loss")?;
        let a = uncertainty_alpha(t, p, &u, x)?;
        Ok(vec![uncertainty_wrap(t, l, a, tau)?])
    })
}

fn detector(rng: &mut ChaCha8Rng, o: &SuiteOptions) -> Result<GradCheckReport> {
    let builders = [Builder::FpnFree, Builder::Fpn, Builder::Fg, Builder::Cfg];
    let mut config = ModelConfig {
        backbone: small_backbone(),
        ..ModelConfig::default()
    };
    config.pyramid.channels = 8;
    config.pyramid.builder = builders[rng.random_range(0..builders.len())];
    config.pyramid.cascade_times = if config.pyramid.builder == Builder::Cfg {
        2
    } else {
        1
    };
    config.loss.mode = LossMode::AuxUncertainty;
    config.head.shared = rng.random_bool(0.5);
    let (model, params) = Detector::new(&config, rng.random())?;
    let params = with_input(params, Tensor::randn([1, 3, 64, 64], 1.0, rng))?;
    let objects = random_objects(rng, 1, 64.0);
    let coords = sample_param_coords(&params, o.coords.div_ceil(4), rng);
    grad_check_params(
        &params,
        |t, p| {
            let x = t.param(p, "input")?;
            Ok(model.forward_train(t, p, x, &objects, false)?.total)
        },
        o.step,
        &coords,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        let o = SuiteOptions {
            trials: 2,
            coords: 8,
            ..SuiteOptions::default()
        };
        let entries = run_gradient_suite(&o, &mut |_| {}).unwrap();
        assert_eq!(entries.len(), cases().len());
        for e in entries {
            assert!(e.max_rel_error < TOLERANCE, "{e:?}");
            assert!(e.coords_checked > 0);
        }
    }
}
