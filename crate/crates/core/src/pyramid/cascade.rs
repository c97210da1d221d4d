use super::fpn::{init_smoothing, Laterals};
use super::grouping::{channel_swap, regroup_channels, smooth_pyramid, GroupingModule};
use super::{PyramidConfig, PyramidSet, LEVELS};
use crate::autograd::{Tape, UpsampleMode, Var};
use crate::backbone::{BackboneFeatures, BackboneSpec};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, ConvSpec};
use crate::params::{Initializer, ParamSet, WeightInit};

/// Fusion-weight network: two 3×3 conv blocks, then a 1×1 projection to one
/// channel and a sigmoid. The output map is broadcast over channels.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub blocks: [ConvBlock; 2],
    pub proj: Conv,
}

impl FusionWeights {
    pub fn register(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let z = channels;
        Ok(FusionWeights {
            blocks: [
                ConvBlock::register(params, init, &format!("{name}.b1"), ConvSpec::new(z, z, 3))?,
                ConvBlock::register(params, init, &format!("{name}.b2"), ConvSpec::new(z, z, 3))?,
            ],
            proj: Conv::register(
                params,
                init,
                &format!("{name}.proj"),
                ConvSpec::new(z, 1, 1).init(WeightInit::Normal(0.01)),
            )?,
        })
    }

    /// `N×1×H×W` weights in `(0, 1)`.
    pub fn weights(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(tape, params, y)?;
        }
        let y = self.proj.forward(tape, params, y)?;
        Ok(tape.sigmoid(y))
    }

    /// `f_w(a)·a + f_w(b)·b` with the same parameters on both branches.
    pub fn fuse(&self, tape: &mut Tape, params: &ParamSet, a: Var, b: Var) -> Result<Var> {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::shape("cascade_fuse", tape.shape(a), tape.shape(b)));
        }
        let wa = self.weights(tape, params, a)?;
        let wb = self.weights(tape, params, b)?;
        let fa = tape.mul_channel_broadcast(a, wa)?;
        let fb = tape.mul_channel_broadcast(b, wb)?;
        tape.add(fa, fb)
    }
}

/// Feature-grouping pyramid with `cascade_times` grouping stages.
#[derive(Clone, Debug)]
pub struct CascadeFpn {
    laterals: Laterals,
    /// One set of four grouping modules per stage (a single set when shared).
    grouping: Vec<Vec<GroupingModule>>,
    /// One fusion network per refinement stage, shared across levels.
    fusion: Vec<FusionWeights>,
    smooth: Vec<Conv>,
    upsample: UpsampleMode,
    cascade_times: usize,
}

impl CascadeFpn {
    pub fn init(
        config: &PyramidConfig,
        backbone: &BackboneSpec,
        params: &mut ParamSet,
        init: &mut Initializer,
    ) -> Result<Self> {
        config.validate()?;
        let z = config.channels;
        let t = config.cascade_times;
        let laterals = Laterals::init(backbone, z, params, init)?;
        let sets = if config.share_grouping { 1 } else { t };
        let mut grouping = Vec::with_capacity(sets);
        for s in 0..sets {
            let mods = LEVELS
                .iter()
                .map(|&k| {
                    GroupingModule::register(
                        params,
                        init,
                        &format!("pyramid.group{}.g{k}", s + 1),
                        z,
                        config.row_softmax,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            grouping.push(mods);
        }
        let fusion = (2..=t)
            .map(|s| FusionWeights::register(params, init, &format!("pyramid.fuse{s}"), z))
            .collect::<Result<_>>()?;
        let smooth = init_smoothing(z, params, init)?;
        Ok(CascadeFpn {
            laterals,
            grouping,
            fusion,
            smooth,
            upsample: config.upsample,
            cascade_times: t,
        })
    }

    pub fn cascade_times(&self) -> usize {
        self.cascade_times
    }

    pub fn channels(&self) -> usize {
        self.laterals.channels()
    }

    pub fn laterals(&self) -> &Laterals {
        &self.laterals
    }

    pub fn grouping_modules(&self, stage: usize) -> &[GroupingModule] {
        &self.grouping[stage.min(self.grouping.len() - 1)]
    }

    pub fn fusion(&self) -> &[FusionWeights] {
        &self.fusion
    }

    /// One grouping stage: per-level channel swap, then quarter regrouping.
    pub fn group_stage(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        stage: usize,
        inputs: &[Var],
    ) -> Result<[Var; 4]> {
        let mods = self.grouping_modules(stage);
        let mut swapped = Vec::with_capacity(4);
        for (g, &x) in mods.iter().zip(inputs) {
            let m = g.matrix(tape, params, x)?;
            swapped.push(channel_swap(tape, x, m)?);
        }
        regroup_channels(tape, &swapped, self.upsample)
    }

    /// Refinement stages `2..=T` applied to `P'`.
    pub fn cascade_fuse(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pre: [Var; 4],
    ) -> Result<[Var; 4]> {
        let mut cur = pre;
        for (s, fw) in self.fusion.iter().enumerate() {
            let hat = self.group_stage(tape, params, s + 1, &cur)?;
            let mut next = [cur[0]; 4];
            for i in 0..4 {
                next[i] = fw.fuse(tape, params, cur[i], hat[i])?;
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Pyramid before smoothing (`P'`, or `P''` after the cascade).
    pub fn pre_smoothing(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feats: &BackboneFeatures,
    ) -> Result<[Var; 4]> {
        let lat = self.laterals.project(tape, params, feats)?;
        let first = self.group_stage(tape, params, 0, &lat)?;
        self.cascade_fuse(tape, params, first)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feats: &BackboneFeatures,
    ) -> Result<PyramidSet> {
        let pre = self.pre_smoothing(tape, params, feats)?;
        smooth_pyramid(tape, params, &pre, &self.smooth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn half_weights_on_equal_inputs_is_identity() {
        let mut p = ParamSet::new();
        let fw = FusionWeights::register(&mut p, &mut Initializer::new(4), "fw", 8).unwrap();
        p.set(&fw.proj.weight, Tensor::zeros([1, 8, 1, 1])).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 8, 4, 4], |i| {
            (i as f64 * 0.31).sin() * 3.0
        }));
        let y = fw.fuse(&mut t, &p, x, x).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(x)) < 1e-15);
    }

    #[test]
    fn fuse_shape_mismatch() {
        let mut p = ParamSet::new();
        let fw = FusionWeights::register(&mut p, &mut Initializer::new(4), "fw", 8).unwrap();
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([1, 8, 4, 4]));
        let b = t.constant(Tensor::zeros([1, 8, 2, 2]));
        assert!(fw.fuse(&mut t, &p, a, b).is_err());
    }
}
