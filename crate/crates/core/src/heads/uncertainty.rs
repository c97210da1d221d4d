use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::heads::loss::{FocalParams, LevelLoss};
use crate::nn::{Conv, ConvSpec};
use crate::params::{Initializer, ParamSet, WeightInit};
use crate::tensor::Tensor;

/// Which losses are summed into the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Base,
    Aux,
    AuxUncertainty,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Base => "base",
            LossMode::Aux => "aux",
            LossMode::AuxUncertainty => "aux-uncertainty",
        }
    }

    pub fn uses_aux(self) -> bool {
        self != LossMode::Base
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(LossMode::Base),
            "aux" => Ok(LossMode::Aux),
            "aux-uncertainty" => Ok(LossMode::AuxUncertainty),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected base, aux, or aux-uncertainty)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight of the regression term.
    pub lambda: f64,
    /// Penalty on the uncertainty `α`.
    pub tau: f64,
    pub focal: FocalParams,
    /// Longest-side boundaries between consecutive pyramid levels, in pixels.
    pub level_boundaries: Vec<f64>,
    /// Backbone levels that receive auxiliary heads.
    pub aux_levels: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Base,
            lambda: 1.0,
            tau: 0.1,
            focal: FocalParams::default(),
            level_boundaries: vec![8.0, 16.0, 32.0],
            aux_levels: vec![2, 3, 4],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "loss.tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.focal.gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal.alpha) {
            return Err(Error::Config(
                "loss.focal needs gamma >= 0 and alpha in [0, 1]".into(),
            ));
        }
        if self.level_boundaries.windows(2).any(|w| w[1] <= w[0])
            || self.level_boundaries.iter().any(|&b| b <= 0.0)
        {
            return Err(Error::Config(
                "loss.level_boundaries must be positive and increasing".into(),
            ));
        }
        if self.aux_levels.iter().any(|&l| !(2..=5).contains(&l))
            || self.aux_levels.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(
                "loss.aux_levels must be increasing levels in 2..=5".into(),
            ));
        }
        Ok(())
    }
}

/// 1×1 projection whose spatial mean, clamped at zero, is the uncertainty `α`.
#[derive(Clone, Debug)]
pub struct UncertaintyHead {
    pub proj: Conv,
}

impl UncertaintyHead {
    /// The bias starts positive so the clamp is inactive at initialization.
    pub const INITIAL_BIAS: f64 = 0.5;

    pub fn register(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let proj = Conv::register(
            params,
            init,
            name,
            ConvSpec::new(channels, 1, 1)
                .init(WeightInit::Normal(0.01))
                .bias_init(Self::INITIAL_BIAS),
        )?;
        Ok(UncertaintyHead { proj })
    }
}

/// `α = relu(mean(w ⋆ x + b))`, a scalar.
pub fn uncertainty_alpha(
    tape: &mut Tape,
    params: &ParamSet,
    head: &UncertaintyHead,
    x: Var,
) -> Result<Var> {
    let z = head.proj.forward(tape, params, x)?;
    let m = tape.mean(z);
    Ok(tape.relu(m))
}

/// `e^{−α}·L̂ + τ·α`.
pub fn uncertainty_wrap(tape: &mut Tape, loss: Var, alpha: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "uncertainty_wrap",
            format!("tau must be positive, got {tau}"),
        ));
    }
    let w = tape.neg_exp(alpha);
    let weighted = tape.mul(w, loss)?;
    let penalty = tape.scale(alpha, tau);
    tape.add(weighted, penalty)
}

pub fn wrapped_value(loss: f64, alpha: f64, tau: f64) -> f64 {
    (-alpha).exp() * loss + tau * alpha
}

/// Minimizer of the wrapped loss over `α ≥ 0`.
pub fn optimal_alpha(loss: f64, tau: f64) -> f64 {
    (loss / tau).ln().max(0.0)
}

/// Projected gradient descent on `α ≥ 0` with backtracking line search,
/// gradients taken through the tape. Returns `(α, value, iterations)`.
pub fn descend_alpha(
    loss: f64,
    tau: f64,
    alpha0: f64,
    max_iters: usize,
) -> Result<(f64, f64, usize)> {
    let eval = |a: f64| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(loss));
        let alpha = tape.leaf(Tensor::scalar(a), true);
        let out = uncertainty_wrap(&mut tape, l, alpha, tau)?;
        let g = tape.backward(out)?.wrt_or_zero(alpha).item()?;
        Ok((tape.value(out).item()?, g))
    };
    let mut a = alpha0.max(0.0);
    let (mut f, mut g) = eval(a)?;
    for it in 0..max_iters {
        let mut step = 1.0 / tau;
        loop {
            let next = (a - step * g).max(0.0);
            let (fn_, gn) = eval(next)?;
            let moved = next - a;
            // Armijo condition for the projected step
            if fn_ <= f + 1e-4 * g * moved || step < 1e-12 {
                if moved.abs() < 1e-12 {
                    return Ok((next, fn_, it + 1));
                }
                a = next;
                f = fn_;
                g = gn;
                break;
            }
            step *= 0.5;
        }
    }
    Ok((a, f, max_iters))
}

/// Auxiliary losses of one backbone stage, with their uncertainties when
/// uncertainty weighting is on.
#[derive(Clone, Copy, Debug)]
pub struct AuxTerms {
    pub level: usize,
    pub cls: Var,
    pub reg: Var,
    pub alpha_cls: Option<Var>,
    pub alpha_reg: Option<Var>,
}

/// Sums the per-level losses and, depending on `mode`, the auxiliary losses
/// (plainly, or each task wrapped by its uncertainty).
pub fn total_loss(
    tape: &mut Tape,
    base: &[LevelLoss],
    aux: &[AuxTerms],
    mode: LossMode,
    lambda: f64,
    tau: f64,
) -> Result<Var> {
    let mut terms: Vec<Var> = base.iter().map(|l| l.combined).collect();
    if terms.is_empty() {
        return Err(Error::invalid("total_loss", "no base losses"));
    }
    match mode {
        LossMode::Base => {}
        LossMode::Aux => {
            for a in aux {
                let r = tape.scale(a.reg, lambda);
                terms.push(tape.add(a.cls, r)?);
            }
        }
        LossMode::AuxUncertainty => {
            for a in aux {
                let (Some(ac), Some(ar)) = (a.alpha_cls, a.alpha_reg) else {
                    return Err(Error::invalid(
                        "total_loss",
                        format!("auxiliary stage {} has no uncertainty terms", a.level),
                    ));
                };
                terms.push(uncertainty_wrap(tape, a.cls, ac, tau)?);
                let r = tape.scale(a.reg, lambda);
                terms.push(uncertainty_wrap(tape, r, ar, tau)?);
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLossValues {
    pub level: usize,
    pub cls: f64,
    pub reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLossValues {
    pub level: usize,
    pub cls: f64,
    pub reg: f64,
    pub alpha_cls: Option<f64>,
    pub alpha_reg: Option<f64>,
}

/// Scalar values of every loss component of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mode: LossMode,
    pub lambda: f64,
    pub tau: f64,
    pub levels: Vec<LevelLossValues>,
    pub aux: Vec<AuxLossValues>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn collect(
        tape: &Tape,
        levels: &[(usize, LevelLoss)],
        aux: &[AuxTerms],
        total: Var,
        mode: LossMode,
        lambda: f64,
        tau: f64,
    ) -> Result<Self> {
        let v = |x: Var| tape.value(x).item();
        let mut level_values = Vec::with_capacity(levels.len());
        for (l, loss) in levels {
            level_values.push(LevelLossValues {
                level: *l,
                cls: v(loss.cls)?,
                reg: v(loss.reg)?,
            });
        }
        let mut aux_values = Vec::with_capacity(aux.len());
        for a in aux {
            aux_values.push(AuxLossValues {
                level: a.level,
                cls: v(a.cls)?,
                reg: v(a.reg)?,
                alpha_cls: a.alpha_cls.map(v).transpose()?,
                alpha_reg: a.alpha_reg.map(v).transpose()?,
            });
        }
        Ok(LossBreakdown {
            mode,
            lambda,
            tau,
            levels: level_values,
            aux: aux_values,
            total: v(total)?,
        })
    }

    pub fn base(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.cls + self.lambda * l.reg)
            .sum()
    }

    /// Recomputes the total from the parts.
    pub fn recombine(&self) -> f64 {
        let mut total = self.base();
        for a in &self.aux {
            total += match (self.mode, a.alpha_cls, a.alpha_reg) {
                (LossMode::Base, _, _) => 0.0,
                (LossMode::AuxUncertainty, Some(ac), Some(ar)) => {
                    wrapped_value(a.cls, ac, self.tau)
                        + wrapped_value(self.lambda * a.reg, ar, self.tau)
                }
                _ => a.cls + self.lambda * a.reg,
            };
        }
        total
    }
}
