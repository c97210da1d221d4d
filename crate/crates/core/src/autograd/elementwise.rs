use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

/// Elementwise operation selector for [`Tape::ew`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Exp,
    /// `e^{-x}`
    NegExp,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

/// How `b` lines up against `a` in a binary op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b` holds one value.
    Scalar,
    /// `a` is `N×C×H×W`, `b` is `N×1×H×W`.
    Channel {
        c: usize,
        hw: usize,
    },
}

impl Broadcast {
    #[inline]
    fn b_index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel { c, hw } => (i / (c * hw)) * hw + i % hw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    Exp,
    NegExp,
    Relu,
    Sigmoid,
}

impl UnaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryKind::Scale(_) => "scalar_mul",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::Exp => "exp",
            UnaryKind::NegExp => "neg_exp",
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Scale(s) => s * x,
            UnaryKind::AddScalar(s) => x + s,
            UnaryKind::Exp => x.exp(),
            UnaryKind::NegExp => (-x).exp(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn binary_backward(
    kind: BinaryKind,
    bcast: Broadcast,
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ad, bd) = (a.data(), b.data());
    let ga = need_a.then(|| match kind {
        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
        BinaryKind::Mul => g
            .iter()
            .enumerate()
            .map(|(i, gi)| gi * bd[bcast.b_index(i)])
            .collect(),
    });
    let gb = need_b.then(|| {
        let mut out = vec![0.0; bd.len()];
        for (i, gi) in g.iter().enumerate() {
            let j = bcast.b_index(i);
            out[j] += match kind {
                BinaryKind::Add => *gi,
                BinaryKind::Sub => -gi,
                BinaryKind::Mul => gi * ad[i],
            };
        }
        out
    });
    (ga, gb)
}

pub(crate) fn unary_backward(kind: UnaryKind, x: &Tensor, y: &Tensor, g: &[f64]) -> Vec<f64> {
    let (xd, yd) = (x.data(), y.data());
    match kind {
        UnaryKind::Scale(s) => g.iter().map(|gi| gi * s).collect(),
        UnaryKind::AddScalar(_) => g.to_vec(),
        UnaryKind::Exp => g.iter().zip(yd).map(|(gi, yi)| gi * yi).collect(),
        UnaryKind::NegExp => g.iter().zip(yd).map(|(gi, yi)| -gi * yi).collect(),
        UnaryKind::Relu => g
            .iter()
            .zip(xd)
            .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
            .collect(),
        UnaryKind::Sigmoid => g
            .iter()
            .zip(yd)
            .map(|(gi, yi)| gi * yi * (1.0 - yi))
            .collect(),
    }
}

impl Tape {
    /// Generic elementwise entry point. Binary kinds require `b`; unary kinds ignore it.
    pub fn ew(&mut self, kind: EwKind, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |k| {
            b.ok_or_else(|| Error::invalid("ew", format!("{kind:?} needs a second operand")))
                .map(|b| (k, b))
        };
        match kind {
            EwKind::Add => {
                let (k, b) = binary(BinaryKind::Add)?;
                self.binary(k, a, b)
            }
            EwKind::Sub => {
                let (k, b) = binary(BinaryKind::Sub)?;
                self.binary(k, a, b)
            }
            EwKind::Mul => {
                let (k, b) = binary(BinaryKind::Mul)?;
                self.binary(k, a, b)
            }
            EwKind::ScalarMul(s) => Ok(self.unary(UnaryKind::Scale(s), a)),
            EwKind::Exp => Ok(self.unary(UnaryKind::Exp, a)),
            EwKind::NegExp => Ok(self.unary(UnaryKind::NegExp, a)),
            EwKind::Relu => Ok(self.unary(UnaryKind::Relu, a)),
            EwKind::Sigmoid => Ok(self.unary(UnaryKind::Sigmoid, a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `a · b` where `a` is `N×C×H×W` and `b` is `N×1×H×W`, broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(a))?;
        if self.shape(b) != [n, 1, h, w] {
            return Err(Error::shape(
                "mul_channel_broadcast",
                self.shape(a),
                self.shape(b),
            ));
        }
        self.binary_with(BinaryKind::Mul, a, b, Broadcast::Channel { c, hw: h * w })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::AddScalar(s), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::NegExp, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = if sa == sb {
            Broadcast::Same
        } else if self.value(b).numel() == 1 {
            Broadcast::Scalar
        } else {
            return Err(Error::shape(kind.name(), sa, sb));
        };
        self.binary_with(kind, a, b, bcast)
    }

    fn binary_with(&mut self, kind: BinaryKind, a: Var, b: Var, bcast: Broadcast) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| kind.apply(x, bd[bcast.b_index(i)]))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Unary { kind, x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negative() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(-3.0));
        let y = t.ew(EwKind::Relu, x, None).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 0.0);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 3]));
        let y = t.ew(EwKind::Exp, x, None).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn add_and_its_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let b = t.leaf(Tensor::new([2], vec![3.0, 4.0]).unwrap(), true);
        let c = t.ew(EwKind::Add, a, Some(b)).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([3, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn binary_requires_second_operand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2]));
        assert!(t.ew(EwKind::Mul, a, None).is_err());
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = t.leaf(Tensor::scalar(2.0), true);
        let y = t.mul(a, s).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
