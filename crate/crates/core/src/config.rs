//! Run configuration: a TOML document with one table per concern. Unknown
//! keys are rejected, and every value is validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::detect::DecodeParams;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, LossConfig};
use crate::model::ModelConfig;
use crate::pyramid::PyramidConfig;
use crate::scene::{SceneSpec, CLASS_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `steps` after which the step size is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Linear step-size warmup from `lr / 3` over this many steps.
    pub warmup_steps: usize,
    /// Random horizontal flips of training scenes.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            decay_at: vec![0.75, 0.92],
            decay_factor: 0.1,
            warmup_steps: 0,
            flip: true,
        }
    }
}

impl TrainConfig {
    /// Step size in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.lr;
        for &f in &self.decay_at {
            if step >= (f * self.steps as f64).floor() as usize {
                lr *= self.decay_factor;
            }
        }
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= 1.0 / 3.0 + t * 2.0 / 3.0;
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub max_overlap: f64,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        DataConfig {
            train_scenes: 512,
            eval_scenes: 128,
            train_seed: 1,
            eval_seed: 2,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_side: s.min_side,
            max_side: s.max_side,
            max_overlap: s.max_overlap,
            noise: s.noise,
        }
    }
}

impl DataConfig {
    pub fn scene_spec(&self, image_size: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            image_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_side: self.min_side,
            max_side: self.max_side,
            max_overlap: self.max_overlap,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many steps (and always at the start and end); 0
    /// evaluates only at the start and end.
    pub every: usize,
    pub batch_size: usize,
    pub iou_thresholds: Vec<f64>,
    pub decode: DecodeParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 500,
            batch_size: 16,
            iou_thresholds: vec![0.5],
            decode: DecodeParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Adds elapsed seconds to the report, which makes it non-reproducible.
    pub record_wall_time: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub backbone: BackboneSpec,
    pub pyramid: PyramidConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            backbone: BackboneSpec::default(),
            pyramid: PyramidConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text of the fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 (hex) of [`RunConfig::to_toml`].
    pub fn digest(&self) -> Result<String> {
        Ok(digest_bytes(self.to_toml()?.as_bytes()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            pyramid: self.pyramid.clone(),
            head: self.head.clone(),
            loss: self.loss.clone(),
            num_classes: CLASS_NAMES.len(),
        }
    }

    pub fn train_scenes(&self) -> SceneSpec {
        self.data
            .scene_spec(self.backbone.input_size, self.data.train_seed)
    }

    pub fn eval_scenes(&self) -> SceneSpec {
        self.data
            .scene_spec(self.backbone.input_size, self.data.eval_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train_scenes().validate()?;
        self.eval.decode.validate()?;
        let t = &self.train;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite())
            || !(0.0..1.0).contains(&t.momentum)
            || !(t.weight_decay >= 0.0)
        {
            return bad("train needs lr > 0, momentum in [0, 1), weight_decay >= 0");
        }
        if t.decay_at.iter().any(|f| !(0.0..=1.0).contains(f))
            || t.decay_at.windows(2).any(|w| w[1] < w[0])
        {
            return bad("train.decay_at must be increasing fractions in [0, 1]");
        }
        if !(t.decay_factor > 0.0 && t.decay_factor <= 1.0) {
            return bad("train.decay_factor must be in (0, 1]");
        }
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return bad("data needs at least one training and one evaluation scene");
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be positive");
        }
        if self.eval.iou_thresholds.is_empty()
            || self
                .eval
                .iou_thresholds
                .iter()
                .any(|&x| !(x > 0.0 && x < 1.0))
        {
            return bad("eval.iou_thresholds must be non-empty and inside (0, 1)");
        }
        Ok(())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
