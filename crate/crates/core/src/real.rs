use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type of tensors. Training runs in `f32`; `f64` instantiations exist
/// so finite-difference oracles are not swamped by rounding.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C <- A B + beta C` for an `m x k` by `k x n` product with arbitrary
    /// row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_s: Strides,
        b: &[Self],
        b_s: Strides,
        beta: Self,
        c: &mut [Self],
        c_s: Strides,
    );
}

/// `(row stride, column stride)` of a matrix view.
pub type Strides = (usize, usize);

fn check_view<T>(buf: &[T], rows: usize, cols: usize, (rs, cs): Strides) {
    if rows > 0 && cols > 0 {
        assert!(
            (rows - 1) * rs + (cols - 1) * cs < buf.len(),
            "matrix view exceeds its buffer"
        );
    }
}

macro_rules! gemm_impl {
    ($f:ident) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            a_s: Strides,
            b: &[Self],
            b_s: Strides,
            beta: Self,
            c: &mut [Self],
            c_s: Strides,
        ) {
            check_view(a, m, k, a_s);
            check_view(b, k, n, b_s);
            check_view(c, m, n, c_s);
            // SAFETY: each view was checked to lie inside its slice, and `c` is
            // borrowed mutably so it cannot alias `a` or `b`.
            unsafe {
                matrixmultiply::$f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    a_s.0 as isize,
                    a_s.1 as isize,
                    b.as_ptr(),
                    b_s.0 as isize,
                    b_s.1 as isize,
                    beta,
                    c.as_mut_ptr(),
                    c_s.0 as isize,
                    c_s.1 as isize,
                )
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(sgemm);
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    gemm_impl!(dgemm);
}
