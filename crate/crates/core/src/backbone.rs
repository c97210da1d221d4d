//! Staged convolutional feature extractor producing `C2..C5`.
//!
//! Stage `s` is a stride-2 3×3 conv block followed by `blocks_per_stage[s] − 1`
//! residual blocks, so stage outputs have strides 2, 4, 8, 16, 32.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, ConvSpec, GroupNorm};
use crate::params::{Initializer, ParamSet};
use crate::tensor::dims4;

pub const IMAGE_CHANNELS: usize = 3;
pub const NUM_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub input_size: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            stage_channels: vec![8, 16, 24, 32, 40],
            blocks_per_stage: vec![1; NUM_STAGES],
            input_size: 64,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("backbone spec", reason));
        if self.stage_channels.len() != NUM_STAGES || self.blocks_per_stage.len() != NUM_STAGES {
            return bad(format!(
                "need {NUM_STAGES} stage channel counts and block counts"
            ));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!(
                "input size {} not divisible by 32",
                self.input_size
            ));
        }
        for &c in &self.stage_channels {
            if c == 0 || c % crate::nn::default_groups(c) != 0 {
                return bad(format!(
                    "stage channel count {c} incompatible with group norm"
                ));
            }
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return bad("every stage needs at least one block".into());
        }
        Ok(())
    }

    /// Channel count of `C_level` for `level ∈ 2..=5`.
    pub fn channels_of(&self, level: usize) -> usize {
        self.stage_channels[level - 1]
    }

    /// Spatial extent of `C_level`.
    pub fn size_of(&self, level: usize) -> usize {
        self.input_size >> level
    }
}

#[derive(Clone, Debug)]
struct Residual {
    first: ConvBlock,
    second_conv: crate::nn::Conv,
    second_norm: GroupNorm,
}

impl Residual {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let y = self.first.forward(tape, params, x)?;
        let y = self.second_conv.forward(tape, params, y)?;
        let y = self.second_norm.forward(tape, params, y)?;
        let y = tape.add(y, x)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBlock,
    blocks: Vec<Residual>,
}

/// Backbone structure; weights live in a [`ParamSet`] under `backbone.s{i}`.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    stages: Vec<Stage>,
}

/// Backbone outputs `C2..C5`, indexed by level.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub c: [Var; 4],
}

impl BackboneFeatures {
    pub fn level(&self, level: usize) -> Var {
        self.c[level - 2]
    }
}

pub fn stage_name(stage: usize) -> String {
    format!("backbone.s{stage}")
}

/// Registers all backbone parameters with Kaiming-scaled convolutions.
pub fn init_backbone(
    spec: &BackboneSpec,
    params: &mut ParamSet,
    init: &mut Initializer,
) -> Result<Backbone> {
    spec.validate()?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut in_ch = IMAGE_CHANNELS;
    for (s, (&out, &blocks)) in spec
        .stage_channels
        .iter()
        .zip(&spec.blocks_per_stage)
        .enumerate()
    {
        let name = stage_name(s);
        let down = ConvBlock::register(
            params,
            init,
            &format!("{name}.down"),
            ConvSpec::new(in_ch, out, 3).stride(2),
        )?;
        let mut res = Vec::new();
        for b in 1..blocks {
            let rn = format!("{name}.res{b}");
            res.push(Residual {
                first: ConvBlock::register(
                    params,
                    init,
                    &format!("{rn}.a"),
                    ConvSpec::new(out, out, 3),
                )?,
                second_conv: crate::nn::Conv::register(
                    params,
                    init,
                    &format!("{rn}.b.conv"),
                    ConvSpec::new(out, out, 3).bias(false),
                )?,
                second_norm: GroupNorm::register(params, &format!("{rn}.b.gn"), out)?,
            });
        }
        stages.push(Stage { down, blocks: res });
        in_ch = out;
    }
    Ok(Backbone {
        spec: spec.clone(),
        stages,
    })
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Runs the five stages on an `N×3×S×S` image.
    ///
    /// With `block_stage_edges`, every stage input from the previous stage
    /// passes through `stop_gradient`, so features only receive gradient from
    /// their direct consumers outside the backbone chain.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        image: Var,
        block_stage_edges: bool,
    ) -> Result<BackboneFeatures> {
        let (_, c, h, w) = dims4(tape.shape(image))?;
        let s = self.spec.input_size;
        if c != IMAGE_CHANNELS || h != s || w != s {
            return Err(Error::shape(
                "backbone input",
                tape.shape(image),
                &[0, IMAGE_CHANNELS, s, s],
            ));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            if block_stage_edges && i > 0 {
                x = tape.stop_gradient(x);
            }
            x = stage.down.forward(tape, params, x)?;
            for r in &stage.blocks {
                x = r.forward(tape, params, x)?;
            }
            if i >= 1 {
                outs.push(x);
            }
        }
        Ok(BackboneFeatures {
            c: [outs[0], outs[1], outs[2], outs[3]],
        })
    }
}
