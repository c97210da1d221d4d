use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, c, h, wd) = dims4(x)?;
    let (o, ci, kh, kw) = dims4(w)?;
    if ci != c {
        return Err(Error::shape("conv2d", x, w));
    }
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel must be 1×1 or 3×3, got {kh}×{kw}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::invalid("conv2d", "kernel larger than padded input"));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Ok((
        n,
        o,
        Geometry {
            c,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        },
    ))
}

fn im2col(img: &[f64], g: &Geometry, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                img[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, img: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, o, g) = geometry(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.numel() != o {
            return Err(Error::shape("conv2d bias", b.shape(), &[o]));
        }
    }
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.col_cols();
    let mut out = vec![0.0; n * out_sz];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for i in 0..n {
        let img = &x.data()[i * in_sz..(i + 1) * in_sz];
        let rhs: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        let dst = &mut out[i * out_sz..(i + 1) * out_sz];
        gemm(
            o,
            g.col_rows(),
            g.col_cols(),
            w.data(),
            false,
            rhs,
            false,
            dst,
            false,
        );
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.oh, g.ow], out))
}

/// Returns `(d input, d kernel, d bias)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (n, o, g) = geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let in_sz = g.c * g.h * g.w;
    let cols = g.col_cols();
    let out_sz = o * cols;
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let mut gb = vec![0.0; o];
    let mut col = vec![
        0.0;
        if g.is_pointwise() {
            0
        } else {
            g.col_rows() * cols
        }
    ];
    let mut dcol = vec![
        0.0;
        if g.is_pointwise() || !need_x {
            0
        } else {
            g.col_rows() * cols
        }
    ];
    for i in 0..n {
        let go = &gout[i * out_sz..(i + 1) * out_sz];
        for (oc, chunk) in go.chunks(cols).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
        let img = &x.data()[i * in_sz..(i + 1) * in_sz];
        if let Some(gw) = gw.as_mut() {
            let rhs: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut col);
                &col
            };
            // dW += dOut · colᵀ
            gemm(o, cols, g.col_rows(), go, false, rhs, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                gemm(g.col_rows(), o, cols, w.data(), true, go, false, dst, false);
            } else {
                gemm(
                    g.col_rows(),
                    o,
                    cols,
                    w.data(),
                    true,
                    go,
                    false,
                    &mut dcol,
                    false,
                );
                col2im(&dcol, &g, dst);
            }
        }
    }
    (gx, gw, gb)
}

impl Tape {
    /// 2-d cross-correlation of an `N×C×H×W` input with an `O×C×k×k` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window reference.
    fn reference(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, o, oh, ow]);
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.map_or(0.0, |b| b.data()[oc]);
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        s += x.at4(ni, ci, iy as usize, ix as usize)
                                            * w.at4(oc, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_window_cells() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at4(0, 0, r, c), 4.0);
        }
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::from_fn([2, 3, 4, 4], |i| i as f64 * 0.1 - 3.0);
        let w = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::zeros([3]);
        assert_eq!(conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::from_fn([1, 2, 5, 5], |i| i as f64);
        let w = Tensor::zeros([3, 2, 3, 3]);
        let b = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), 1, 1).unwrap();
        for oc in 0..3 {
            for i in 0..25 {
                assert_eq!(y.data()[oc * 25 + i], b.data()[oc]);
            }
        }
    }

    #[test]
    fn matches_sliding_window_reference() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let x = Tensor::from_fn([2, 3, 7, 6], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
            let w = Tensor::from_fn([4, 3, k, k], |i| ((i * 13 % 29) as f64 / 14.0) - 1.0);
            let b = Tensor::from_fn([4], |i| i as f64 * 0.25);
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let want = reference(&x, &w, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::zeros([1, 1, 64, 64]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, 1, 1).is_err());
        let w5 = Tensor::zeros([1, 2, 5, 5]);
        assert!(conv2d_forward(&x, &w5, None, 1, 2).is_err());
    }
}
