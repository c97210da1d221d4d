//! The full detector: backbone, pyramid neck, dense heads, and optional
//! auxiliary heads on raw backbone features.

use crate::autograd::{Tape, Var};
use crate::backbone::{init_backbone, Backbone, BackboneFeatures, BackboneSpec};
use crate::boxes::GtObject;
use crate::error::{Error, Result};
use crate::heads::{
    assign_targets, detection_loss, total_loss, uncertainty_alpha, AuxTerms, Head, HeadConfig,
    LevelLoss, LevelRanges, LossBreakdown, LossConfig, LossMode, UncertaintyHead,
};
use crate::params::{Initializer, ParamSet};
use crate::pyramid::{Neck, PyramidConfig, PyramidSet};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub pyramid: PyramidConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneSpec::default(),
            pyramid: PyramidConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pyramid.validate()?;
        self.loss.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.head.tower_blocks == 0 || self.head.aux_tower_blocks == 0 {
            return Err(Error::Config("head towers need at least one block".into()));
        }
        Ok(())
    }
}

/// Auxiliary head on backbone feature `C_level`.
#[derive(Clone, Debug)]
pub struct AuxHead {
    pub level: usize,
    pub head: Head,
    pub alpha_cls: Option<UncertaintyHead>,
    pub alpha_reg: Option<UncertaintyHead>,
}

/// Head outputs on one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction {
    pub level: usize,
    pub cls: Var,
    pub reg: Var,
}

impl LevelPrediction {
    pub fn stride(&self) -> f64 {
        (1u64 << self.level) as f64
    }
}

/// Everything recorded by a training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub total: Var,
    pub levels: Vec<(usize, LevelLoss)>,
    pub aux: Vec<AuxTerms>,
    pub features: BackboneFeatures,
    pub pyramid: PyramidSet,
    pub predictions: Vec<LevelPrediction>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: ModelConfig,
    backbone: Backbone,
    neck: Neck,
    /// One head, or one per level in `neck.levels()` order.
    heads: Vec<Head>,
    aux: Vec<AuxHead>,
}

impl Detector {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Detector, ParamSet)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seed);
        let backbone = init_backbone(&config.backbone, &mut params, &mut init)?;
        let neck = Neck::init(&config.pyramid, &config.backbone, &mut params, &mut init)?;
        let levels = neck.levels();
        let in_ch = neck.channels();
        let z = config.pyramid.channels;
        let hc = &config.head;
        let heads = if hc.shared || levels.len() == 1 {
            vec![Head::register(
                &mut params,
                &mut init,
                "head",
                in_ch,
                z,
                hc.tower_blocks,
                config.num_classes,
            )?]
        } else {
            levels
                .iter()
                .map(|l| {
                    Head::register(
                        &mut params,
                        &mut init,
                        &format!("head.p{l}"),
                        in_ch,
                        z,
                        hc.tower_blocks,
                        config.num_classes,
                    )
                })
                .collect::<Result<_>>()?
        };
        let mut aux = Vec::new();
        if config.loss.mode.uses_aux() {
            for &l in &config.loss.aux_levels {
                let head = Head::register(
                    &mut params,
                    &mut init,
                    &format!("aux.c{l}"),
                    config.backbone.channels_of(l),
                    z,
                    hc.aux_tower_blocks,
                    config.num_classes,
                )?;
                aux.push(AuxHead {
                    level: l,
                    head,
                    alpha_cls: None,
                    alpha_reg: None,
                });
            }
            // registered last so the remaining parameters do not depend on the mode
            if config.loss.mode == LossMode::AuxUncertainty {
                for a in &mut aux {
                    let name = format!("aux.c{}", a.level);
                    a.alpha_cls = Some(UncertaintyHead::register(
                        &mut params,
                        &mut init,
                        &format!("{name}.alpha_cls"),
                        z,
                    )?);
                    a.alpha_reg = Some(UncertaintyHead::register(
                        &mut params,
                        &mut init,
                        &format!("{name}.alpha_reg"),
                        z,
                    )?);
                }
            }
        }
        Ok((
            Detector {
                config: config.clone(),
                backbone,
                neck,
                heads,
                aux,
            },
            params,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn neck(&self) -> &Neck {
        &self.neck
    }

    pub fn aux_heads(&self) -> &[AuxHead] {
        &self.aux
    }

    /// Levels carrying detection heads.
    pub fn levels(&self) -> Vec<usize> {
        self.neck.levels()
    }

    pub fn level_ranges(&self) -> Result<LevelRanges> {
        let levels = self.levels();
        if levels.len() == 1 {
            Ok(LevelRanges::single(levels[0]))
        } else {
            LevelRanges::from_boundaries(&levels, &self.config.loss.level_boundaries)
        }
    }

    fn head_for(&self, index: usize) -> &Head {
        if self.heads.len() == 1 {
            &self.heads[0]
        } else {
            &self.heads[index]
        }
    }

    fn predict(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pyramid: &PyramidSet,
    ) -> Result<Vec<LevelPrediction>> {
        let mut out = Vec::new();
        for (i, l) in self.levels().into_iter().enumerate() {
            let x = pyramid.level(l)?;
            let o = self.head_for(i).forward(tape, params, x)?;
            out.push(LevelPrediction {
                level: l,
                cls: o.cls,
                reg: o.reg,
            });
        }
        Ok(out)
    }

    /// Forward pass used at test time: no auxiliary heads, no losses.
    pub fn forward_inference(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        images: Var,
    ) -> Result<Vec<LevelPrediction>> {
        let feats = self.backbone.forward(tape, params, images, false)?;
        let pyramid = self.neck.forward(tape, params, &feats)?;
        self.predict(tape, params, &pyramid)
    }

    /// Forward pass with every loss of the configured mode.
    ///
    /// `objects` holds the ground truth of each image in the batch. With
    /// `block_stage_edges` the backbone features only receive gradient through
    /// the pyramid and auxiliary heads.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        images: Var,
        objects: &[Vec<GtObject>],
        block_stage_edges: bool,
    ) -> Result<TrainForward> {
        let batch = tape.shape(images)[0];
        if objects.len() != batch {
            return Err(Error::invalid(
                "forward_train",
                format!("{} annotation lists for a batch of {batch}", objects.len()),
            ));
        }
        let lc = &self.config.loss;
        let features = self
            .backbone
            .forward(tape, params, images, block_stage_edges)?;
        let pyramid = self.neck.forward(tape, params, &features)?;
        let predictions = self.predict(tape, params, &pyramid)?;

        let grids: Vec<(usize, usize, usize)> = predictions
            .iter()
            .map(|p| {
                let s = tape.shape(p.cls);
                (p.level, s[2], s[3])
            })
            .collect();
        let assignment = assign_targets(objects, &grids, &self.level_ranges()?)?;
        let normalizer = assignment.total_positives().max(1) as f64;
        let mut levels = Vec::with_capacity(predictions.len());
        for p in &predictions {
            let t = assignment
                .level(p.level)
                .expect("grid registered for every level");
            levels.push((
                p.level,
                detection_loss(tape, p.cls, p.reg, t, lc.lambda, &lc.focal, normalizer)?,
            ));
        }

        let mut aux = Vec::with_capacity(self.aux.len());
        for a in &self.aux {
            let x = features.level(a.level);
            let o = a.head.forward(tape, params, x)?;
            let s = tape.shape(o.cls);
            let assignment = assign_targets(
                objects,
                &[(a.level, s[2], s[3])],
                &LevelRanges::single(a.level),
            )?;
            let normalizer = assignment.total_positives().max(1) as f64;
            let t = &assignment.levels[0];
            let loss = detection_loss(tape, o.cls, o.reg, t, lc.lambda, &lc.focal, normalizer)?;
            let alpha = |tape: &mut Tape, h: &Option<UncertaintyHead>| -> Result<Option<Var>> {
                h.as_ref()
                    .map(|h| uncertainty_alpha(tape, params, h, o.feature))
                    .transpose()
            };
            let alpha_cls = alpha(tape, &a.alpha_cls)?;
            let alpha_reg = alpha(tape, &a.alpha_reg)?;
            aux.push(AuxTerms {
                level: a.level,
                cls: loss.cls,
                reg: loss.reg,
                alpha_cls,
                alpha_reg,
            });
        }

        let base: Vec<LevelLoss> = levels.iter().map(|l| l.1).collect();
        let total = total_loss(tape, &base, &aux, lc.mode, lc.lambda, lc.tau)?;
        let breakdown =
            LossBreakdown::collect(tape, &levels, &aux, total, lc.mode, lc.lambda, lc.tau)?;
        Ok(TrainForward {
            total,
            levels,
            aux,
            features,
            pyramid,
            predictions,
            breakdown,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::pyramid::Builder;
    use crate::tensor::Tensor;

    fn config(builder: Builder, mode: LossMode) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.pyramid.builder = builder;
        c.loss.mode = mode;
        c
    }

    fn image(n: usize) -> Tensor {
        Tensor::from_fn([n, 3, 64, 64], |i| ((i * 37) % 101) as f64 / 101.0)
    }

    fn objects() -> Vec<Vec<GtObject>> {
        vec![vec![
            GtObject {
                bbox: BBox::new(4.0, 4.0, 10.0, 10.0),
                class: 0,
            },
            GtObject {
                bbox: BBox::new(20.0, 10.0, 60.0, 50.0),
                class: 2,
            },
        ]]
    }

    #[test]
    fn inference_graph_independent_of_loss_mode() {
        let mut counts = Vec::new();
        for mode in [LossMode::Base, LossMode::Aux, LossMode::AuxUncertainty] {
            let (m, p) = Detector::new(&config(Builder::Fpn, mode), 5).unwrap();
            let mut t = Tape::new();
            let x = t.constant(image(1));
            m.forward_inference(&mut t, &p, x).unwrap();
            counts.push((t.op_count(), t.op_kinds()));
        }
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[0], counts[2]);
    }

    #[test]
    fn shared_parameters_do_not_depend_on_mode() {
        let (_, base) = Detector::new(&config(Builder::Fpn, LossMode::Base), 9).unwrap();
        let (_, unc) = Detector::new(&config(Builder::Fpn, LossMode::AuxUncertainty), 9).unwrap();
        for (name, value) in base.iter() {
            assert_eq!(unc.get(name).unwrap(), value, "{name}");
        }
        assert!(unc.contains("aux.c3.alpha_reg.bias"));
    }

    #[test]
    fn train_forward_breakdown_consistent() {
        for builder in [Builder::FpnFree, Builder::Fpn, Builder::Cfg] {
            let mut c = config(builder, LossMode::AuxUncertainty);
            if builder == Builder::Cfg {
                c.pyramid.cascade_times = 2;
            }
            let (m, p) = Detector::new(&c, 1).unwrap();
            let mut t = Tape::new();
            let x = t.constant(image(1));
            let out = m.forward_train(&mut t, &p, x, &objects(), false).unwrap();
            let b = &out.breakdown;
            assert!((b.recombine() - b.total).abs() < 1e-12);
            assert_eq!(b.aux.len(), 3);
            assert!(b.levels.iter().all(|l| l.cls >= 0.0 && l.reg >= 0.0));
            let grads = t.backward(out.total).unwrap().param_grads(&p);
            assert!(grads.values().all(|g| g.all_finite()));
        }
    }

    #[test]
    fn unshared_heads_have_per_level_parameters() {
        let mut c = config(Builder::Fpn, LossMode::Base);
        c.head.shared = false;
        let (m, p) = Detector::new(&c, 0).unwrap();
        assert!(p.contains("head.p2.cls.weight") && p.contains("head.p5.cls.weight"));
        let mut t = Tape::new();
        let x = t.constant(image(2));
        let preds = m.forward_inference(&mut t, &p, x).unwrap();
        assert_eq!(preds.len(), 4);
        assert_eq!(t.shape(preds[0].cls), &[2, 3, 16, 16]);
    }

    #[test]
    fn annotation_count_must_match_batch() {
        let (m, p) = Detector::new(&config(Builder::Fpn, LossMode::Base), 0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(image(2));
        assert!(m.forward_train(&mut t, &p, x, &objects(), false).is_err());
    }
}
