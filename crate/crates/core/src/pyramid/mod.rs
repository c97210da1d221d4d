//! Pyramid builders over backbone features `C2..C5`.
//!
//! * [`TopDownFpn`]: lateral 1×1 projections, a top-down running sum with
//!   2× upsampling, and per-level 3×3 smoothing.
//! * [`CascadeFpn`]: channel swapping with input-dependent `Z×Z` matrices,
//!   quarter regrouping so every level holds channels from every backbone
//!   level, optional cascaded refinement with learned fusion weights, then
//!   per-level smoothing. With one stage this is the plain feature-grouping
//!   builder.

mod cascade;
mod fpn;
mod grouping;
mod linearity;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cascade::{CascadeFpn, FusionWeights};
pub use fpn::{build_topdown_fpn, Laterals, TopDownFpn};
pub use grouping::{channel_swap, regroup_channels, smooth_pyramid, GroupingModule};
pub use linearity::{
    superposition_residual, verify_linear_expansion, with_zero_biases, LinearityReport,
};

use crate::autograd::{Tape, UpsampleMode, Var};
use crate::backbone::{BackboneFeatures, BackboneSpec};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamSet};

pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builder {
    /// Head reads `C5` only.
    FpnFree,
    /// Classical top-down pyramid.
    Fpn,
    /// Feature grouping, single stage.
    Fg,
    /// Feature grouping with `cascade_times` stages.
    Cfg,
}

impl Builder {
    pub fn as_str(self) -> &'static str {
        match self {
            Builder::FpnFree => "fpn-free",
            Builder::Fpn => "fpn",
            Builder::Fg => "fg",
            Builder::Cfg => "cfg",
        }
    }
}

impl std::str::FromStr for Builder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpn-free" => Ok(Builder::FpnFree),
            "fpn" => Ok(Builder::Fpn),
            "fg" => Ok(Builder::Fg),
            "cfg" => Ok(Builder::Cfg),
            other => Err(Error::Config(format!("unknown builder `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub builder: Builder,
    /// Common pyramid channel count `Z`.
    pub channels: usize,
    pub cascade_times: usize,
    pub upsample: UpsampleMode,
    /// Row-softmax on the channel-swapping matrices.
    pub row_softmax: bool,
    /// Share grouping parameters across cascade stages.
    pub share_grouping: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            builder: Builder::Fpn,
            channels: 16,
            cascade_times: 1,
            upsample: UpsampleMode::Nearest,
            row_softmax: false,
            share_grouping: false,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "pyramid.channels = {} must be a positive multiple of 4",
                self.channels
            )));
        }
        if self.channels % crate::nn::default_groups(self.channels) != 0 {
            return Err(Error::Config(
                "pyramid.channels incompatible with group norm".into(),
            ));
        }
        if self.cascade_times < 1 {
            return Err(Error::Config(
                "pyramid.cascade_times must be at least 1".into(),
            ));
        }
        if self.builder == Builder::Fg && self.cascade_times != 1 {
            return Err(Error::Config(
                "builder `fg` is single-stage; use `cfg` with cascade_times".into(),
            ));
        }
        Ok(())
    }
}

/// Per-level feature maps of one forward pass.
#[derive(Clone, Debug)]
pub struct PyramidSet {
    levels: BTreeMap<usize, Var>,
    channels: usize,
}

impl PyramidSet {
    pub fn new(levels: BTreeMap<usize, Var>, channels: usize) -> Self {
        PyramidSet { levels, channels }
    }

    pub fn level(&self, l: usize) -> Result<Var> {
        self.levels
            .get(&l)
            .copied()
            .ok_or_else(|| Error::invalid("pyramid", format!("missing level {l}")))
    }

    pub fn levels(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.levels.iter().map(|(l, v)| (*l, *v))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(level: usize) -> usize {
        1 << level
    }

    /// `(level → shape)` map.
    pub fn shapes(&self, tape: &Tape) -> BTreeMap<usize, Vec<usize>> {
        self.levels
            .iter()
            .map(|(l, v)| (*l, tape.shape(*v).to_vec()))
            .collect()
    }
}

/// The configured pyramid builder.
#[derive(Clone, Debug)]
pub enum Neck {
    FpnFree { channels: usize },
    TopDown(TopDownFpn),
    Grouping(CascadeFpn),
}

impl Neck {
    pub fn init(
        config: &PyramidConfig,
        backbone: &BackboneSpec,
        params: &mut ParamSet,
        init: &mut Initializer,
    ) -> Result<Self> {
        config.validate()?;
        Ok(match config.builder {
            Builder::FpnFree => Neck::FpnFree {
                channels: backbone.channels_of(5),
            },
            Builder::Fpn => Neck::TopDown(TopDownFpn::init(config, backbone, params, init)?),
            Builder::Fg | Builder::Cfg => {
                Neck::Grouping(CascadeFpn::init(config, backbone, params, init)?)
            }
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feats: &BackboneFeatures,
    ) -> Result<PyramidSet> {
        match self {
            Neck::FpnFree { channels } => Ok(PyramidSet::new(
                BTreeMap::from([(5, feats.level(5))]),
                *channels,
            )),
            Neck::TopDown(f) => f.forward(tape, params, feats),
            Neck::Grouping(f) => f.forward(tape, params, feats),
        }
    }

    /// Levels carrying heads.
    pub fn levels(&self) -> Vec<usize> {
        match self {
            Neck::FpnFree { .. } => vec![5],
            _ => LEVELS.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Neck::FpnFree { channels } => *channels,
            Neck::TopDown(f) => f.channels(),
            Neck::Grouping(f) => f.channels(),
        }
    }
}
