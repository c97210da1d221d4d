use std::collections::BTreeMap;

use super::{PyramidConfig, PyramidSet, LEVELS};
use crate::autograd::{Tape, UpsampleMode, Var};
use crate::backbone::{BackboneFeatures, BackboneSpec};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec};
use crate::params::{Initializer, ParamSet};

/// Lateral 1×1 projections `C_k → C'_k` with `Z` output channels.
#[derive(Clone, Debug)]
pub struct Laterals {
    convs: Vec<Conv>,
    channels: usize,
}

impl Laterals {
    pub fn init(
        backbone: &BackboneSpec,
        channels: usize,
        params: &mut ParamSet,
        init: &mut Initializer,
    ) -> Result<Self> {
        let convs = LEVELS
            .iter()
            .map(|&k| {
                Conv::register(
                    params,
                    init,
                    &format!("pyramid.lat{k}"),
                    ConvSpec::new(backbone.channels_of(k), channels, 1),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Laterals { convs, channels })
    }

    pub fn conv(&self, level: usize) -> &Conv {
        &self.convs[level - 2]
    }

    /// `C' = {C'_2..C'_5}`.
    pub fn project(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feats: &BackboneFeatures,
    ) -> Result<[Var; 4]> {
        let mut out = Vec::with_capacity(4);
        for (conv, &k) in self.convs.iter().zip(&LEVELS) {
            let x = feats.level(k);
            let ch = tape.shape(x)[1];
            if ch != conv.in_channels {
                return Err(Error::shape(
                    "lateral_project",
                    tape.shape(x),
                    &[0, conv.in_channels],
                ));
            }
            out.push(conv.forward(tape, params, x)?);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Registers per-level 3×3 smoothing convolutions `pyramid.smooth{l}`.
pub(crate) fn init_smoothing(
    channels: usize,
    params: &mut ParamSet,
    init: &mut Initializer,
) -> Result<Vec<Conv>> {
    LEVELS
        .iter()
        .map(|&l| {
            Conv::register(
                params,
                init,
                &format!("pyramid.smooth{l}"),
                ConvSpec::new(channels, channels, 3),
            )
        })
        .collect()
}

/// Top-down pass over laterals:
/// `P5 = smooth5(C'5)`, `P_l = smooth_l(C'_l + up2×(running sum))` for `l = 4, 3, 2`.
pub fn build_topdown_fpn(
    tape: &mut Tape,
    params: &ParamSet,
    laterals: &[Var],
    smooth: &[Conv],
    mode: UpsampleMode,
) -> Result<PyramidSet> {
    if laterals.len() != 4 || smooth.len() != 4 {
        return Err(Error::invalid(
            "build_topdown_fpn",
            "need laterals and smoothing for levels 2..5",
        ));
    }
    let channels = tape.shape(laterals[3])[1];
    let mut levels = BTreeMap::new();
    let mut running = laterals[3];
    levels.insert(5, smooth[3].forward(tape, params, running)?);
    for idx in (0..3).rev() {
        let up = tape.upsample2x(running, mode)?;
        running = tape.add(laterals[idx], up)?;
        levels.insert(idx + 2, smooth[idx].forward(tape, params, running)?);
    }
    Ok(PyramidSet::new(levels, channels))
}

#[derive(Clone, Debug)]
pub struct TopDownFpn {
    laterals: Laterals,
    smooth: Vec<Conv>,
    upsample: UpsampleMode,
}

impl TopDownFpn {
    pub fn init(
        config: &PyramidConfig,
        backbone: &BackboneSpec,
        params: &mut ParamSet,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(TopDownFpn {
            laterals: Laterals::init(backbone, config.channels, params, init)?,
            smooth: init_smoothing(config.channels, params, init)?,
            upsample: config.upsample,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feats: &BackboneFeatures,
    ) -> Result<PyramidSet> {
        let lat = self.laterals.project(tape, params, feats)?;
        build_topdown_fpn(tape, params, &lat, &self.smooth, self.upsample)
    }

    pub fn laterals(&self) -> &Laterals {
        &self.laterals
    }

    pub fn smoothing(&self) -> &[Conv] {
        &self.smooth
    }

    pub fn channels(&self) -> usize {
        self.laterals.channels()
    }
}
