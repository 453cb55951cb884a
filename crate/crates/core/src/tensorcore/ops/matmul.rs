use super::{want, FnBackward};
use crate::error::{Error, Result};
use crate::tensorcore::meter::add_macs;
use crate::tensorcore::Tensor;

/// `c = a·b + beta·c` for row-major operands, where `a` is `m×k` (or its
/// transpose stored `k×m` when `a_t`) and `b` is `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    add_macs((m * k * n) as u64);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // regions checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[.., m, k] · [k, n]` (shared right operand) or `[.., m, k] · [.., k, n]`
    /// (batched, identical leading dims).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be at least 2-D, got {ls:?} and {rs:?}"),
            ));
        }
        let k = ls[ls.len() - 1];
        let m = ls[ls.len() - 2];
        if rs.len() == 2 {
            if rs[0] != k {
                return Err(Error::shape("matmul", format!("inner dims differ: {ls:?} · {rs:?}")));
            }
            let n = rs[1];
            let rows = self.numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, self.data(), false, rhs.data(), false, &mut out, 0.0);
            let mut shape = ls.to_vec();
            *shape.last_mut().unwrap() = n;
            return Tensor::from_op(
                "matmul",
                out,
                &shape,
                &[self, rhs],
                FnBackward::new("matmul", move |ctx, g| {
                    let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                    let ga = want(ctx, 0).then(|| {
                        let mut ga = vec![0.0; rows * k];
                        gemm(rows, n, k, g, false, b.data(), true, &mut ga, 0.0);
                        ga
                    });
                    let gb = want(ctx, 1).then(|| {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, rows, n, a.data(), true, g, false, &mut gb, 0.0);
                        gb
                    });
                    vec![ga, gb]
                }),
            );
        }
        if rs.len() != ls.len() || rs[..rs.len() - 2] != ls[..ls.len() - 2] || rs[rs.len() - 2] != k {
            return Err(Error::shape(
                "matmul",
                format!("batched operands do not conform: {ls:?} · {rs:?}"),
            ));
        }
        let n = rs[rs.len() - 1];
        let batches = self.numel() / (m * k);
        let mut out = vec![0.0; batches * m * n];
        for bi in 0..batches {
            gemm(
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &rhs.data()[bi * k * n..(bi + 1) * k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let mut shape = ls.to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::from_op(
            "matmul",
            out,
            &shape,
            &[self, rhs],
            FnBackward::new("bmm", move |ctx, g| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = want(ctx, 0).then(|| {
                    let mut ga = vec![0.0; batches * m * k];
                    for bi in 0..batches {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &b[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            0.0,
                        );
                    }
                    ga
                });
                let gb = want(ctx, 1).then(|| {
                    let mut gb = vec![0.0; batches * k * n];
                    for bi in 0..batches {
                        gemm(
                            k,
                            m,
                            n,
                            &a[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            0.0,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }
}
