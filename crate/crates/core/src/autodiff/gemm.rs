//! Safe wrapper over the `matrixmultiply` double-precision kernel.
#![allow(unsafe_code)]

/// Row-major `m x k` operand, optionally stored transposed (`k x m`).
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(data: &'a [f64]) -> Self {
        Operand {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [f64]) -> Self {
        Operand {
            data,
            transposed: true,
        }
    }

    /// Row and column strides for a logical `rows x cols` view.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`) with `a: m x k`,
/// `b: k x n`, `c: m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.data.len(), m * k, "gemm lhs size");
    assert_eq!(b.data.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm output size");
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee that every index reachable through
    // the strides stays inside the three slices, and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
