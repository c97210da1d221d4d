use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, ConvSpec};
use crate::params::{Initializer, ParamSet, WeightInit};
use crate::tensor::dims4;

/// Foreground prior used to initialize the classification bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Conv blocks in the shared tower of pyramid (or `C5`) heads.
    pub tower_blocks: usize,
    /// Conv blocks in auxiliary heads.
    pub aux_tower_blocks: usize,
    /// One head for all pyramid levels instead of one per level.
    pub shared: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tower_blocks: 2,
            aux_tower_blocks: 1,
            shared: true,
        }
    }
}

/// Prediction tower followed by 1×1 classification and regression projections.
#[derive(Clone, Debug)]
pub struct Head {
    tower: Vec<ConvBlock>,
    pub cls: Conv,
    pub reg: Conv,
    in_channels: usize,
    num_classes: usize,
}

/// Outputs of one head on one feature map.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N×K×h×w` logits.
    pub cls: Var,
    /// `N×4×h×w` distances (left, top, right, bottom) in units of the level stride.
    pub reg: Var,
    /// Tower output that feeds both projections.
    pub feature: Var,
}

impl Head {
    pub fn register(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        channels: usize,
        tower_blocks: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if tower_blocks == 0 {
            return Err(Error::Config("head tower needs at least one block".into()));
        }
        let mut tower = Vec::with_capacity(tower_blocks);
        let mut c = in_channels;
        for b in 0..tower_blocks {
            tower.push(ConvBlock::register(
                params,
                init,
                &format!("{name}.pre{b}"),
                ConvSpec::new(c, channels, 3).init(WeightInit::Normal(0.01)),
            )?);
            c = channels;
        }
        let prior_bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        let cls = Conv::register(
            params,
            init,
            &format!("{name}.cls"),
            ConvSpec::new(channels, num_classes, 1)
                .init(WeightInit::Normal(0.01))
                .bias_init(prior_bias),
        )?;
        let reg = Conv::register(
            params,
            init,
            &format!("{name}.reg"),
            ConvSpec::new(channels, 4, 1).init(WeightInit::Normal(0.01)),
        )?;
        Ok(Head {
            tower,
            cls,
            reg,
            in_channels,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<HeadOutput> {
        let (_, c, _, _) = dims4(tape.shape(x))?;
        if c != self.in_channels {
            return Err(Error::shape(
                "head_forward",
                tape.shape(x),
                &[0, self.in_channels],
            ));
        }
        let mut f = x;
        for b in &self.tower {
            f = b.forward(tape, params, f)?;
        }
        let cls = self.cls.forward(tape, params, f)?;
        let raw = self.reg.forward(tape, params, f)?;
        let reg = tape.exp(raw);
        Ok(HeadOutput {
            cls,
            reg,
            feature: f,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn head() -> (Head, ParamSet) {
        let mut p = ParamSet::new();
        let h = Head::register(&mut p, &mut Initializer::new(3), "h", 6, 8, 2, 3).unwrap();
        (h, p)
    }

    #[test]
    fn zero_feature_zero_bias_gives_zero_logits() {
        let (h, mut p) = head();
        p.set(&h.cls.bias.clone().unwrap(), Tensor::zeros([3]))
            .unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 6, 8, 8]));
        let o = h.forward(&mut t, &p, x).unwrap();
        assert!(t.value(o.cls).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_size_preserved_and_distances_positive() {
        let (h, p) = head();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 6, 8, 8], |i| (i as f64 * 0.3).sin()));
        let o = h.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.shape(o.cls), &[2, 3, 8, 8]);
        assert_eq!(t.shape(o.reg), &[2, 4, 8, 8]);
        assert!(t.value(o.reg).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn channel_mismatch() {
        let (h, p) = head();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 5, 8, 8]));
        assert!(h.forward(&mut t, &p, x).is_err());
    }
}
