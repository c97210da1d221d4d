use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Default group count for `channels`: `min(8, channels)`.
pub fn default_groups(channels: usize) -> usize {
    channels.min(8)
}

struct Forward {
    y: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Forward> {
    let (n, c, h, w) = dims4(x.shape())?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("group_norm", "eps must be positive"));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape("group_norm affine", gamma.shape(), &[c]));
    }
    let hw = h * w;
    let per = c / groups * hw;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; n * groups];
    for ng in 0..n * groups {
        let span = ng * per..(ng + 1) * per;
        let seg = &xd[span.clone()];
        let mean = seg.iter().sum::<f64>() / per as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ng] = istd;
        let g0 = (ng % groups) * (c / groups);
        for (j, idx) in span.enumerate() {
            let ch = g0 + j / hw;
            let xh = (xd[idx] - mean) * istd;
            xhat[idx] = xh;
            y[idx] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok(Forward { y, xhat, inv_std })
}

pub(crate) fn group_norm_backward(
    shape: &[usize],
    gamma: &Tensor,
    groups: usize,
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(shape).expect("validated in forward");
    let hw = h * w;
    let cpg = c / groups;
    let per = cpg * hw;
    let mut gx = vec![0.0; g.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ng in 0..n * groups {
        let base = ng * per;
        let g0 = (ng % groups) * cpg;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..per {
            let idx = base + j;
            let ch = g0 + j / hw;
            ggamma[ch] += g[idx] * xhat[idx];
            gbeta[ch] += g[idx];
            let d = g[idx] * gamma.data()[ch];
            sum_d += d;
            sum_dx += d * xhat[idx];
        }
        let m = per as f64;
        let istd = inv_std[ng];
        for j in 0..per {
            let idx = base + j;
            let ch = g0 + j / hw;
            let d = g[idx] * gamma.data()[ch];
            gx[idx] = istd / m * (m * d - sum_d - xhat[idx] * sum_dx);
        }
    }
    (gx, ggamma, gbeta)
}

impl Tape {
    /// Group normalization over `N×C×H×W` with per-channel affine `gamma`, `beta` of length `C`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let f = forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        )?;
        let value = Tensor::from_parts(self.shape(x).to_vec(), f.y);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: f.xhat,
                inv_std: f.inv_std,
            },
        ))
    }
}
