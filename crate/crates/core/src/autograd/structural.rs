use serde::{Deserialize, Serialize};

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    /// Half-pixel centers, edge-clamped.
    Bilinear,
}

/// Source taps `(i0, i1, w0, w1)` for each output index of a 1-d bilinear resize.
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn upsample_forward(x: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x.shape())?;
    if factor == 0 {
        return Err(Error::invalid("upsample", "factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[(p * oh + oy) * ow + ox] = xd[(p * h + oy / factor) * w + ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..n * c {
                let src = &xd[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        out[(p * oh + oy) * ow + ox] = wy0
                            * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                            + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn upsample_backward(
    shape: &[usize],
    factor: usize,
    mode: UpsampleMode,
    g: &[f64],
) -> Vec<f64> {
    let (n, c, h, w) = dims4(shape).expect("validated in forward");
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = vec![0.0; n * c * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[(p * h + oy / factor) * w + ox / factor] += g[(p * oh + oy) * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..n * c {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = g[(p * oh + oy) * ow + ox];
                        dst[y0 * w + x0] += gv * wy0 * wx0;
                        dst[y0 * w + x1] += gv * wy0 * wx1;
                        dst[y1 * w + x0] += gv * wy1 * wx0;
                        dst[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
        }
    }
    gx
}

fn adaptive_avg_pool_forward(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x.shape())?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "adaptive_avg_pool",
            "extents must be positive",
        ));
    }
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += xd[(p * h + y) * w + xx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn adaptive_avg_pool_backward(
    shape: &[usize],
    out_shape: &[usize],
    g: &[f64],
) -> Vec<f64> {
    let (n, c, h, w) = dims4(shape).expect("validated in forward");
    let (_, _, oh, ow) = dims4(out_shape).expect("validated in forward");
    let mut gx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let share = g[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gx[(p * h + y) * w + xx] += share;
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn concat_backward(out: &Tensor, inputs: &[&Tensor], g: &[f64]) -> Vec<Vec<f64>> {
    let (n, ctot, h, w) = dims4(out.shape()).expect("validated in forward");
    let hw = h * w;
    let mut parts = Vec::with_capacity(inputs.len());
    let mut off = 0;
    for t in inputs {
        let c = t.shape()[1];
        let mut gi = Vec::with_capacity(t.numel());
        for ni in 0..n {
            let base = (ni * ctot + off) * hw;
            gi.extend_from_slice(&g[base..base + c * hw]);
        }
        parts.push(gi);
        off += c;
    }
    parts
}

pub(crate) fn narrow_backward(
    in_shape: &[usize],
    out_shape: &[usize],
    start: usize,
    g: &[f64],
) -> Vec<f64> {
    let (n, c, h, w) = dims4(in_shape).expect("validated in forward");
    let len = out_shape[1];
    let hw = h * w;
    let mut gx = vec![0.0; n * c * hw];
    for ni in 0..n {
        let dst = (ni * c + start) * hw;
        let src = ni * len * hw;
        gx[dst..dst + len * hw].copy_from_slice(&g[src..src + len * hw]);
    }
    gx
}

pub(crate) fn softmax_rows_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let cols = *y.shape().last().expect("softmax on rank >= 1");
    let mut gx = vec![0.0; g.len()];
    for ((yr, gr), dst) in y
        .data()
        .chunks(cols)
        .zip(g.chunks(cols))
        .zip(gx.chunks_mut(cols))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, yi), gi) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    gx
}

impl Tape {
    /// Reshape preserving element count and order.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Concatenates `N×C_i×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = dims4(self.shape(first))?;
        let mut ctot = 0;
        for &v in xs {
            let (ni, ci, hi, wi) = dims4(self.shape(v))?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    self.shape(first),
                    self.shape(v),
                ));
            }
            ctot += ci;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for ni in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, ctot, h, w], out);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }))
    }

    /// Channels `start..start + len` of an `N×C×H×W` tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "narrow_channels",
                format!("range {start}..{} out of {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            let base = (ni * c + start) * hw;
            out.extend_from_slice(&xd[base..base + len * hw]);
        }
        let value = Tensor::from_parts(vec![n, len, h, w], out);
        Ok(self.push(value, Op::Narrow { x, start }))
    }

    /// Splits the channel axis into `parts` equal chunks.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let (_, c, _, _) = dims4(self.shape(x))?;
        if parts == 0 || c % parts != 0 {
            return Err(Error::invalid(
                "split_channels",
                format!("{c} channels not divisible into {parts} parts"),
            ));
        }
        let len = c / parts;
        (0..parts)
            .map(|p| self.narrow_channels(x, p * len, len))
            .collect()
    }

    /// Integer-factor spatial upsampling.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let value = upsample_forward(self.value(x), factor, mode)?;
        Ok(self.push(value, Op::Upsample { x, factor, mode }))
    }

    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        self.upsample(x, 2, mode)
    }

    /// Average pooling onto an `oh×ow` grid with adaptive windows.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let value = adaptive_avg_pool_forward(self.value(x), oh, ow)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { x }))
    }

    /// Per-channel spatial mean, `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.adaptive_avg_pool(x, 1, 1)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax_rows", "rank-0 input"))?;
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::SoftmaxRows { x }))
    }

    /// Identity in the forward pass; blocks gradient through this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach { x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upsample_blocks() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.upsample2x(x, UpsampleMode::Nearest).unwrap();
        let want = [
            1., 1., 2., 2., //
            1., 1., 2., 2., //
            3., 3., 4., 4., //
            3., 3., 4., 4.,
        ];
        assert_eq!(t.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(t.value(y).data(), &want);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1, 2, 3, 3], 4.25));
        let y = t.upsample(x, 4, UpsampleMode::Bilinear).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 4.25).abs() < 1e-15));
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([2, 8, 3, 3], |i| i as f64 * 0.5), true);
        let parts = t.split_channels(x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        for p in &parts {
            assert_eq!(t.shape(*p), &[2, 2, 3, 3]);
        }
        let y = t.concat_channels(&parts).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let w = t.constant(Tensor::from_fn([2, 8, 3, 3], |i| (i as f64).cos()));
        let yw = t.mul(y, w).unwrap();
        let l = t.sum(yw);
        let g = t.backward(l).unwrap();
        assert_eq!(&g.wrt(x).unwrap(), t.value(w));
    }

    #[test]
    fn split_rejects_indivisible() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 6, 2, 2]));
        assert!(t.split_channels(x, 4).is_err());
    }

    #[test]
    fn reshape_rejects_count_change() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 3]));
        assert!(t.reshape(x, &[7]).is_err());
        assert!(t.reshape(x, &[3, 2]).is_ok());
    }

    #[test]
    fn pool_to_single_cell_is_mean() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let y = t.adaptive_avg_pool(x, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), &[2.5]);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn global_pool_of_constant() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([2, 3, 5, 4], -1.5));
        let y = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 3, 1, 1]);
        assert!(t.value(y).data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn stop_gradient_keeps_values_and_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([3], |i| i as f64 - 1.0), true);
        let d = t.stop_gradient(x);
        assert_eq!(t.value(d), t.value(x));
        let s = t.sum(d);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(x).is_none());
        assert_eq!(g.wrt_or_zero(x).data(), &[0.0; 3]);

        let y = t.add(x, d).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([3, 4], |i| i as f64 * 0.3 - 1.0));
        let y = t.softmax_rows(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
