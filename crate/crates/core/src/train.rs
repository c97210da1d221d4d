//! Deterministic training loop: seeded batches, SGD with momentum, step
//! decay, periodic evaluation, and the run artifacts on disk.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::{EvalConfig, RunConfig};
use crate::detect::{decode_predictions, LevelMaps};
use crate::error::{Error, Result};
use crate::heads::{LossBreakdown, LossMode};
use crate::metrics::{evaluate_ap, ApSummary};
use crate::model::Detector;
use crate::params::ParamSet;
use crate::report::{CurvePoint, LossWindow, MetricsReport};
use crate::scene::{flip_scene, generate_scene, stack_batch, Scene, SceneSpec};

/// Generates scenes `0..count` of `spec`.
pub fn build_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(spec, i)).collect()
}

/// SGD with heavy-ball momentum: `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, crate::tensor::Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, value) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; value.numel()]);
            for ((theta, vi), gi) in value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *theta;
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Runs the detector over `scenes` and scores the decoded detections.
pub fn evaluate(
    model: &Detector,
    params: &ParamSet,
    scenes: &[Scene],
    eval: &EvalConfig,
) -> Result<ApSummary> {
    let image_size = model.config().backbone.input_size as f64;
    let mut detections = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(eval.batch_size) {
        let (images, _) = stack_batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let preds = model.forward_inference(&mut tape, params, x)?;
        let maps: Vec<LevelMaps> = preds
            .iter()
            .map(|p| LevelMaps {
                level: p.level,
                cls: tape.value(p.cls).clone(),
                reg: tape.value(p.reg).clone(),
            })
            .collect();
        detections.extend(decode_predictions(&maps, image_size, &eval.decode)?);
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    evaluate_ap(
        &detections,
        &gts,
        model.config().num_classes,
        &eval.iou_thresholds,
    )
}

/// Progress notifications from [`train`].
#[derive(Clone, Debug)]
pub enum Progress<'a> {
    Step {
        step: usize,
        breakdown: &'a LossBreakdown,
    },
    Eval {
        step: usize,
        ap: &'a ApSummary,
    },
}

pub struct TrainOutcome {
    pub report: MetricsReport,
    pub params: ParamSet,
    pub model: Detector,
    /// Total loss of every step, before its update.
    pub step_losses: Vec<f64>,
}

fn window(breakdowns: &[LossBreakdown]) -> Option<LossWindow> {
    if breakdowns.is_empty() {
        return None;
    }
    let n = breakdowns.len() as f64;
    let mut w = LossWindow {
        total: 0.0,
        cls: 0.0,
        reg: 0.0,
        aux: 0.0,
    };
    for b in breakdowns {
        w.total += b.total;
        w.cls += b.levels.iter().map(|l| l.cls).sum::<f64>();
        w.reg += b.levels.iter().map(|l| l.reg).sum::<f64>();
        if b.mode != LossMode::Base {
            w.aux += b.total - b.base();
        }
    }
    w.total /= n;
    w.cls /= n;
    w.reg /= n;
    w.aux /= n;
    Some(w)
}

/// Trains the configured detector from scratch. Every number produced is a
/// function of the configuration alone.
pub fn train(config: &RunConfig, progress: &mut dyn FnMut(Progress<'_>)) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let digest = config.digest()?;
    let (model, mut params) = Detector::new(&config.model(), config.seed)?;
    let train_set = build_dataset(&config.train_scenes(), config.data.train_scenes)?;
    let eval_set = build_dataset(&config.eval_scenes(), config.data.eval_scenes)?;
    let tc = &config.train;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut sgd = Sgd::new(tc.momentum, tc.weight_decay);

    let mut curves = Vec::new();
    let mut pending: Vec<LossBreakdown> = Vec::new();
    let mut step_losses = Vec::with_capacity(tc.steps);
    let ap = evaluate(&model, &params, &eval_set, &config.eval)?;
    progress(Progress::Eval { step: 0, ap: &ap });
    curves.push(CurvePoint {
        step: 0,
        lr: tc.lr_at(0),
        loss: None,
        ap,
    });

    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let scene = &train_set[order[cursor]];
            cursor += 1;
            batch.push(if tc.flip && rng.random_bool(0.5) {
                flip_scene(scene)
            } else {
                scene.clone()
            });
        }
        let (images, objects) = stack_batch(&batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = model.forward_train(&mut tape, &params, x, &objects, false)?;
        let loss = out.breakdown.total;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = tape.backward(out.total)?.param_grads(&params);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name} at step {step}"),
                index: 0,
            });
        }
        sgd.step(&mut params, &grads, tc.lr_at(step))?;
        progress(Progress::Step {
            step,
            breakdown: &out.breakdown,
        });
        step_losses.push(loss);
        pending.push(out.breakdown);

        let done = step + 1;
        let cadence = config.eval.every > 0 && done % config.eval.every == 0;
        if cadence || done == tc.steps {
            let ap = evaluate(&model, &params, &eval_set, &config.eval)?;
            progress(Progress::Eval {
                step: done,
                ap: &ap,
            });
            curves.push(CurvePoint {
                step: done,
                lr: tc.lr_at(step),
                loss: window(&pending),
                ap,
            });
            pending.clear();
        }
    }

    let final_ap = curves
        .last()
        .expect("initial evaluation recorded")
        .ap
        .clone();
    let report = MetricsReport {
        config_digest: digest,
        seed: config.seed,
        steps: tc.steps,
        curves,
        ap: final_ap,
        wall_time_s: config
            .report
            .record_wall_time
            .then(|| started.elapsed().as_secs_f64()),
    };
    Ok(TrainOutcome {
        report,
        params,
        model,
        step_losses,
    })
}

/// File names written by [`write_run`].
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Writes the resolved configuration, report, table, and checkpoint to `dir`.
pub fn write_run(config: &RunConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    outcome.report.emit(dir)?;
    let cfg = dir.join(CONFIG_FILE);
    std::fs::write(&cfg, config.to_toml()?).map_err(|e| Error::io(&cfg, e))?;
    outcome.params.save_json(&dir.join(CHECKPOINT_FILE))
}

/// Evaluates saved parameters on the configured evaluation scenes.
pub fn evaluate_checkpoint(config: &RunConfig, params: &ParamSet) -> Result<ApSummary> {
    config.validate()?;
    let (model, fresh) = Detector::new(&config.model(), config.seed)?;
    for (name, value) in fresh.iter() {
        let loaded = params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if loaded.shape() != value.shape() {
            return Err(Error::shape("checkpoint", loaded.shape(), value.shape()));
        }
    }
    let eval_set = build_dataset(&config.eval_scenes(), config.data.eval_scenes)?;
    evaluate(&model, params, &eval_set, &config.eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.train.steps = 3;
        c.train.batch_size = 2;
        c.data.train_scenes = 4;
        c.data.eval_scenes = 4;
        c.eval.every = 2;
        c
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::new([2], vec![0.5, 1.0]).unwrap())]);
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.95, -1.1]);
        sgd.step(&mut p, &g, 0.1).unwrap();
        // v = 0.9·0.5 + 0.5 = 0.95
        assert!((p.get("w").unwrap().data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_reports_initial_evaluation() {
        let mut c = tiny();
        c.train.steps = 0;
        let out = train(&c, &mut |_| {}).unwrap();
        assert_eq!(out.report.curves.len(), 1);
        assert_eq!(out.report.curves[0].step, 0);
        assert!(out.report.curves[0].loss.is_none());
        assert!(out.step_losses.is_empty());
    }

    #[test]
    fn curve_points_at_cadence_and_end() {
        let out = train(&tiny(), &mut |_| {}).unwrap();
        let steps: Vec<usize> = out.report.curves.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 2, 3]);
        assert_eq!(out.step_losses.len(), 3);
        assert!(out.report.wall_time_s.is_none());
        let ap = &out.report.ap;
        assert!((0.0..=1.0).contains(&ap.overall));
    }

    #[test]
    fn identical_runs_identical_reports() {
        let a = train(&tiny(), &mut |_| {}).unwrap();
        let b = train(&tiny(), &mut |_| {}).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = tiny();
        c.train.lr = 1e12;
        c.train.steps = 6;
        match train(&c, &mut |_| {}) {
            Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {}
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|o| o.step_losses)
            ),
        }
    }
}
