use std::collections::BTreeMap;

use super::{PyramidSet, LEVELS};
use crate::autograd::{Tape, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, GroupNorm};
use crate::params::{Initializer, ParamSet, WeightInit};
use crate::tensor::{dims4, Tensor};

/// Std of the matrix-head weights at initialization; small so that `M ≈ I`.
const MATRIX_HEAD_INIT_STD: f64 = 1e-3;

/// Produces a per-image `Z×Z` channel-swapping matrix from a feature map:
/// 1×1 conv → group norm → ReLU → global average pool → affine `Z → Z²`.
#[derive(Clone, Debug)]
pub struct GroupingModule {
    pub conv: Conv,
    pub norm: GroupNorm,
    /// `Z×Z²` weight of the matrix head.
    pub head_weight: String,
    /// `Z²` bias of the matrix head, initialized to the flattened identity.
    pub head_bias: String,
    channels: usize,
    row_softmax: bool,
}

impl GroupingModule {
    pub fn register(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        row_softmax: bool,
    ) -> Result<Self> {
        let z = channels;
        let conv = Conv::register(
            params,
            init,
            &format!("{name}.conv"),
            ConvSpec::new(z, z, 1).bias(false),
        )?;
        let norm = GroupNorm::register(params, &format!("{name}.gn"), z)?;
        let head_weight = format!("{name}.head.weight");
        let head_bias = format!("{name}.head.bias");
        params.insert(
            head_weight.clone(),
            init.tensor(&[z, z * z], WeightInit::Normal(MATRIX_HEAD_INIT_STD), z),
        )?;
        params.insert(head_bias.clone(), Tensor::identity(z).reshaped([z * z])?)?;
        Ok(GroupingModule {
            conv,
            norm,
            head_weight,
            head_bias,
            channels,
            row_softmax,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `M_k` for an `N×Z×H×W` input, shaped `N×Z×Z`.
    pub fn matrix(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let (n, c, _, _) = dims4(tape.shape(x))?;
        let z = self.channels;
        if c != z {
            return Err(Error::shape("grouping_matrix", tape.shape(x), &[n, z]));
        }
        let y = self.conv.forward(tape, params, x)?;
        let y = self.norm.forward(tape, params, y)?;
        let y = tape.relu(y);
        let pooled = tape.global_avg_pool(y)?;
        let pooled = tape.reshape(pooled, &[n, z])?;
        let w = tape.param(params, &self.head_weight)?;
        let b = tape.param(params, &self.head_bias)?;
        let lin = tape.matmul(pooled, w)?;
        // row-broadcast of the bias as ones(N×1) · b(1×Z²)
        let ones = tape.constant(Tensor::ones([n, 1]));
        let b_row = tape.reshape(b, &[1, z * z])?;
        let b_rows = tape.matmul(ones, b_row)?;
        let flat = tape.add(lin, b_rows)?;
        let m = tape.reshape(flat, &[n, z, z])?;
        if self.row_softmax {
            tape.softmax_rows(m)
        } else {
            Ok(m)
        }
    }
}

/// `X = reshape(M · reshape(C', Z×HW))`. `M` is `N×Z×Z`, or `Z×Z` when `N = 1`.
pub fn channel_swap(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    let (n, z, h, w) = dims4(tape.shape(x))?;
    let ms = tape.shape(m).to_vec();
    let m = match ms.as_slice() {
        [a, b, c] if *a == n && *b == z && *c == z => m,
        [a, b] if n == 1 && *a == z && *b == z => tape.reshape(m, &[1, z, z])?,
        _ => return Err(Error::shape("channel_swap", &ms, tape.shape(x))),
    };
    let flat = tape.reshape(x, &[n, z, h * w])?;
    let swapped = tape.matmul(m, flat)?;
    tape.reshape(swapped, &[n, z, h, w])
}

fn resize_to(
    tape: &mut Tape,
    x: Var,
    from_level: usize,
    to_level: usize,
    mode: UpsampleMode,
) -> Result<Var> {
    use std::cmp::Ordering;
    match from_level.cmp(&to_level) {
        Ordering::Equal => Ok(x),
        Ordering::Greater => tape.upsample(x, 1 << (from_level - to_level), mode),
        Ordering::Less => {
            let (_, _, h, w) = dims4(tape.shape(x))?;
            let f = 1 << (to_level - from_level);
            tape.adaptive_avg_pool(x, (h / f).max(1), (w / f).max(1))
        }
    }
}

/// Splits each `X_k` into quarters `X_{k,2..5}` and assembles
/// `P'_l = X_{2,l} ⊕ X_{3,l} ⊕ X_{4,l} ⊕ X_{5,l}`, resizing each quarter to
/// level-`l` resolution (upsampling from coarser levels, average pooling from
/// finer ones).
pub fn regroup_channels(tape: &mut Tape, xs: &[Var], mode: UpsampleMode) -> Result<[Var; 4]> {
    if xs.len() != 4 {
        return Err(Error::invalid(
            "regroup_channels",
            "need exactly four levels",
        ));
    }
    let z = tape.shape(xs[0])[1];
    if z % 4 != 0 {
        return Err(Error::invalid(
            "regroup_channels",
            format!("{z} channels not divisible by 4"),
        ));
    }
    let quarters: Vec<Vec<Var>> = xs
        .iter()
        .map(|&x| tape.split_channels(x, 4))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(4);
    for (li, &l) in LEVELS.iter().enumerate() {
        let mut parts = Vec::with_capacity(4);
        for (ki, &k) in LEVELS.iter().enumerate() {
            parts.push(resize_to(tape, quarters[ki][li], k, l, mode)?);
        }
        out.push(tape.concat_channels(&parts)?);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// `P_l = smooth_l(P'_l)`.
pub fn smooth_pyramid(
    tape: &mut Tape,
    params: &ParamSet,
    pre: &[Var],
    smooth: &[Conv],
) -> Result<PyramidSet> {
    if pre.len() != 4 || smooth.len() != 4 {
        return Err(Error::invalid("smooth_pyramid", "need four levels"));
    }
    let mut levels = BTreeMap::new();
    for ((&l, &x), conv) in LEVELS.iter().zip(pre).zip(smooth) {
        if tape.shape(x)[1] != conv.in_channels {
            return Err(Error::shape(
                "smooth_pyramid",
                tape.shape(x),
                &[0, conv.in_channels],
            ));
        }
        levels.insert(l, conv.forward(tape, params, x)?);
    }
    Ok(PyramidSet::new(levels, smooth[0].out_channels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_swap_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 4, 3, 3], |i| (i as f64).sin()));
        let eye = Tensor::identity(4).into_data();
        let m = t.constant(Tensor::new([2, 4, 4], [eye.clone(), eye].concat()).unwrap());
        let y = channel_swap(&mut t, x, m).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn permutation_swaps_planes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([1, 4, 2, 2], |i| i as f64));
        let mut p = Tensor::identity(4);
        let d = p.data_mut();
        d[0] = 0.0;
        d[5] = 0.0;
        d[1] = 1.0;
        d[4] = 1.0;
        let m = t.constant(p);
        let y = channel_swap(&mut t, x, m).unwrap();
        let (xv, yv) = (t.value(x).data(), t.value(y).data());
        assert_eq!(&yv[0..4], &xv[4..8]);
        assert_eq!(&yv[4..8], &xv[0..4]);
        assert_eq!(&yv[8..], &xv[8..]);
    }

    #[test]
    fn swap_matches_triple_loop() {
        let z = 4;
        let x = Tensor::from_fn([1, z, 2, 2], |i| ((i * 17 % 23) as f64) / 5.0 - 2.0);
        let m = Tensor::from_fn([z, z], |i| ((i * 7 % 11) as f64) / 3.0 - 1.5);
        let mut want = vec![0.0; x.numel()];
        for r in 0..z {
            for p in 0..4 {
                for k in 0..z {
                    want[r * 4 + p] += m.data()[r * z + k] * x.data()[k * 4 + p];
                }
            }
        }
        let mut t = Tape::new();
        let (xv, mv) = (t.constant(x), t.constant(m));
        let y = channel_swap(&mut t, xv, mv).unwrap();
        let diff = t
            .value(y)
            .data()
            .iter()
            .zip(&want)
            .fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn swap_dimension_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 4, 2, 2]));
        let m = t.constant(Tensor::identity(4));
        assert!(channel_swap(&mut t, x, m).is_err());
    }

    #[test]
    fn identity_bias_only_head_gives_identity_matrix() {
        let mut p = ParamSet::new();
        let g = GroupingModule::register(&mut p, &mut Initializer::new(1), "g", 8, false).unwrap();
        p.set(&g.head_weight, Tensor::zeros([8, 64])).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([3, 8, 4, 4], |i| (i as f64 * 0.7).cos()));
        let m = g.matrix(&mut t, &p, x).unwrap();
        let eye = Tensor::identity(8).into_data();
        for n in 0..3 {
            assert_eq!(&t.value(m).data()[n * 64..(n + 1) * 64], eye.as_slice());
        }
    }

    #[test]
    fn matrix_rejects_channel_mismatch() {
        let mut p = ParamSet::new();
        let g = GroupingModule::register(&mut p, &mut Initializer::new(1), "g", 8, false).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 4, 4, 4]));
        assert!(g.matrix(&mut t, &p, x).is_err());
    }

    #[test]
    fn regroup_rejects_indivisible() {
        let mut t = Tape::new();
        let xs: Vec<Var> = LEVELS
            .iter()
            .map(|&l| t.constant(Tensor::zeros([1, 6, 64 >> l, 64 >> l])))
            .collect();
        assert!(regroup_channels(&mut t, &xs, UpsampleMode::Nearest).is_err());
    }
}
