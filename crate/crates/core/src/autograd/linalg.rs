use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// `(batch, m, k, n)` for a 2-d or batched 3-d product.
fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::shape("matmul", sa, sb)),
    }
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for i in 0..batch {
        let gi = &g[i * m * n..(i + 1) * m * n];
        // dA = G · Bᵀ, dB = Aᵀ · G
        gemm(
            m,
            n,
            k,
            gi,
            false,
            &b.data()[i * k * n..],
            true,
            &mut ga[i * m * k..],
            false,
        );
        gemm(
            k,
            m,
            n,
            &a.data()[i * m * k..],
            true,
            gi,
            false,
            &mut gb[i * k * n..],
            false,
        );
    }
    (ga, gb)
}

impl Tape {
    /// Matrix product of `m×k` by `k×n`, or a batched product of `B×m×k` by `B×k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                false,
                &tb.data()[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let shape = if ta.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_b_is_b() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(4));
        let b = t.constant(Tensor::from_fn([4, 3], |k| k as f64 - 5.0));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn zero_times_b_is_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros([2, 2]));
        let b = t.constant(Tensor::from_fn([2, 3], |k| k as f64 + 1.0));
        let c = t.matmul(z, b).unwrap();
        assert!(t.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_product_matches_triple_loop() {
        let a = [[1.0, 2.0], [3.0, 4.0]];
        let b = [[5.0], [6.0]];
        let mut want = [[0.0]; 2];
        for i in 0..2 {
            for j in 0..1 {
                for k in 0..2 {
                    want[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        assert_eq!(want, [[17.0], [39.0]]);
        let mut t = Tape::new();
        let av = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bv = t.constant(Tensor::new([2, 1], vec![5.0, 6.0]).unwrap());
        let c = t.matmul(av, bv).unwrap();
        assert_eq!(t.value(c).data(), &[want[0][0], want[1][0]]);
    }

    #[test]
    fn inner_extent_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn batched_matches_per_batch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn([2, 2, 3], |k| (k as f64).sin()));
        let b = t.constant(Tensor::from_fn([2, 3, 2], |k| (k as f64).cos()));
        let c = t.matmul(a, b).unwrap();
        let cv = t.value(c).clone();
        for bi in 0..2 {
            let a2 = t.constant(
                Tensor::new([2, 3], t.value(a).data()[bi * 6..bi * 6 + 6].to_vec()).unwrap(),
            );
            let b2 = t.constant(
                Tensor::new([3, 2], t.value(b).data()[bi * 6..bi * 6 + 6].to_vec()).unwrap(),
            );
            let c2 = t.matmul(a2, b2).unwrap();
            assert_eq!(t.value(c2).data(), &cv.data()[bi * 4..bi * 4 + 4]);
        }
    }
}
