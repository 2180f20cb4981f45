//! Scalar abstraction so the numeric core runs in either precision.
//!
//! Training and checkpoints use `f32`; gradient verification uses `f64`.
//! Everything above the tensor layer is written against [`Scalar`] and the
//! concrete aliases exported from the crate root.

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors, parameters, and losses.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + AddAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only on non-representable input
    /// (never happens for finite values within range).
    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("f64 value not representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize value not representable in scalar type")
    }

    /// Dense matrix multiply `C = alpha * A @ B + beta * C` with explicit
    /// row/column strides per operand.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and
    /// strides; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_definition_and_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let v: f64 = sigmoid(3.0);
        assert!((v - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!(sigmoid(-1000.0f32) >= 0.0);
    }

    #[test]
    fn softplus_matches_definition_and_is_stable_at_extremes() {
        let v: f64 = softplus(1.0);
        assert!((v - (1.0f64.exp().ln_1p())).abs() < 1e-15);
        // For large x, softplus(x) ~ x.
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert_eq!(softplus(-800.0f64), 0.0);
    }

    #[test]
    fn gemm_wrapper_multiplies_row_major_matrices() {
        // A: 2x3, B: 3x2 row-major.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        unsafe {
            f64::gemm(2, 3, 2, 1.0, a.as_ptr(), 3, 1, b.as_ptr(), 2, 1, 0.0, c.as_mut_ptr(), 2, 1);
        }
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }
}
