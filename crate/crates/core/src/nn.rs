//! Small layer building blocks that register their weights in a [`ParamSet`].

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Initializer, ParamSet, WeightInit};
use crate::tensor::Tensor;

pub use crate::autograd::norm_defaults::{default_groups, DEFAULT_EPS};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub init: WeightInit,
    pub bias_init: f64,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            bias: true,
            init: WeightInit::Kaiming,
            bias_init: 0.0,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    pub fn bias_init(mut self, value: f64) -> Self {
        self.bias_init = value;
        self
    }
}

impl Conv {
    /// Registers `{name}.weight` (and `{name}.bias`). Padding is "same" for stride 1.
    pub fn register(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = spec.in_channels * k * k;
        let weight = format!("{name}.weight");
        params.insert(
            weight.clone(),
            init.tensor(
                &[spec.out_channels, spec.in_channels, k, k],
                spec.init,
                fan_in,
            ),
        )?;
        let bias = if spec.bias {
            let b = format!("{name}.bias");
            params.insert(b.clone(), Tensor::full([spec.out_channels], spec.bias_init))?;
            Some(b)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: k,
            stride: spec.stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight)?;
        let b = match &self.bias {
            Some(name) => Some(tape.param(params, name)?),
            None => None,
        };
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn register(params: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        params.insert(gamma.clone(), Tensor::ones([channels]))?;
        params.insert(beta.clone(), Tensor::zeros([channels]))?;
        Ok(GroupNorm {
            gamma,
            beta,
            groups: default_groups(channels),
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, &self.gamma)?;
        let b = tape.param(params, &self.beta)?;
        tape.group_norm(x, self.groups, g, b, DEFAULT_EPS)
    }
}

/// conv → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn register(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        let channels = spec.out_channels;
        let conv = Conv::register(params, init, &format!("{name}.conv"), spec.bias(false))?;
        let norm = GroupNorm::register(params, &format!("{name}.gn"), channels)?;
        Ok(ConvBlock { conv, norm })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, params, x)?;
        let y = self.norm.forward(tape, params, y)?;
        Ok(tape.relu(y))
    }
}
