//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding its
//! output value. [`Tape::backward`] replays the nodes in reverse insertion
//! order, which is a valid reverse topological order because every node only
//! refers to nodes created before it.

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod norm;
pub mod norm_defaults {
    pub use super::norm::{default_groups, DEFAULT_EPS};
}
mod structural;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub use elementwise::EwKind;
pub use structural::UpsampleMode;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module (fused losses).
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the upstream gradient of the output.
    /// `None` means the input receives nothing.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Binary {
        kind: elementwise::BinaryKind,
        a: Var,
        b: Var,
        bcast: elementwise::Broadcast,
    },
    Unary {
        kind: elementwise::UnaryKind,
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    Detach {
        x: Var,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

impl Op {
    fn kind_name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => kind.name(),
            Op::Unary { kind, .. } => kind.name(),
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat_channels",
            Op::Narrow { .. } => "narrow_channels",
            Op::Upsample { .. } => "upsample",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Detach { .. } => "stop_gradient",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::Upsample { x, .. }
            | Op::AdaptiveAvgPool { x }
            | Op::SoftmaxRows { x }
            | Op::Detach { x } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass. Rebuilt for every step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Names of the recorded non-leaf operations in execution order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.kind_name())
            .collect()
    }

    /// Drops every node and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a named parameter as a differentiable leaf. Repeated calls with
    /// the same name return the same node, so shared weights accumulate one
    /// gradient.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter names inserted on this tape, with their nodes.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Detach { .. } | Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose value was computed by the caller and whose
    /// gradient is given by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Values of custom-op inputs, in order.
    pub fn values(&self, vars: &[Var]) -> Vec<&Tensor> {
        vars.iter().map(|v| self.value(*v)).collect()
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Detach { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, gv: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&gv).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(gv),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Binary { kind, a, b, bcast } => {
                let (ga, gb) = elementwise::binary_backward(
                    *kind,
                    *bcast,
                    val(*a),
                    val(*b),
                    g,
                    self.nodes[a.0].requires_grad,
                    self.nodes[b.0].requires_grad,
                );
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Unary { kind, x } => {
                acc(
                    *x,
                    elementwise::unary_backward(*kind, val(*x), &node.value, g),
                );
            }
            Op::Sum { x } => acc(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean { x } => {
                let n = val(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MatMul { a, b } => {
                let (ga, gb) = linalg::matmul_backward(val(*a), val(*b), g);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let (gx, gw, gb) =
                    conv::conv2d_backward(val(*x), val(*w), g, *stride, *pad, need_x, need_w);
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (gx, ggamma, gbeta) = norm::group_norm_backward(
                    val(*x).shape(),
                    val(*gamma),
                    *groups,
                    xhat,
                    inv_std,
                    g,
                );
                acc(*x, gx);
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Concat { xs } => {
                let parts = structural::concat_backward(
                    &node.value,
                    &xs.iter().map(|v| val(*v)).collect::<Vec<_>>(),
                    g,
                );
                for (v, gv) in xs.iter().zip(parts) {
                    acc(*v, gv);
                }
            }
            Op::Narrow { x, start } => {
                acc(
                    *x,
                    structural::narrow_backward(val(*x).shape(), node.value.shape(), *start, g),
                );
            }
            Op::Upsample { x, factor, mode } => {
                acc(
                    *x,
                    structural::upsample_backward(val(*x).shape(), *factor, *mode, g),
                );
            }
            Op::AdaptiveAvgPool { x } => {
                acc(
                    *x,
                    structural::adaptive_avg_pool_backward(val(*x).shape(), node.value.shape(), g),
                );
            }
            Op::SoftmaxRows { x } => acc(*x, structural::softmax_rows_backward(&node.value, g)),
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = rule.backward(&ins, &node.value, g);
                for (v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        acc(*v, gv);
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: one gradient slot per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no
    /// differentiable path reached it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Like [`Gradients::wrt`] but unreached nodes give a zero tensor.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        self.wrt(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Borrowed gradient data of `v`, without copying.
    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for every parameter of `params`; parameters the loss does not
    /// reach (or that never entered the tape) get zeros.
    pub fn param_grads(&self, params: &ParamSet) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, value)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|v| self.wrt(*v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
