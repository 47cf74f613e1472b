//! Scalar element trait shared by every generic numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point element type usable by tensors, the tape and the samplers.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    /// `c = a b + beta c` for an `m x k` by `k x n` product, every operand
    /// given as a slice plus (row, column) strides. With `beta = 0` the old
    /// contents of `c` are ignored.
    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: StridedMut<'_, Self>) {
        gemm_loops(m, k, n, a, b, beta, c)
    }
}

/// Triple-loop product behind the default [`Scalar::gemm`].
pub fn gemm_loops<S: Float>(m: usize, k: usize, n: usize, a: Strided<'_, S>, b: Strided<'_, S>, beta: S, c: StridedMut<'_, S>) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for l in 0..k {
                acc = acc + a.at(i, l) * b.at(l, j);
            }
            let ix = i * c.1 + j * c.2;
            c.0[ix] = if beta == S::zero() { acc } else { acc + beta * c.0[ix] };
        }
    }
}

/// Read-only matrix view: data, row stride, column stride.
#[derive(Clone, Copy)]
pub struct Strided<'a, S>(pub &'a [S], pub usize, pub usize);

/// Mutable matrix view: data, row stride, column stride.
pub struct StridedMut<'a, S>(pub &'a mut [S], pub usize, pub usize);

impl<S: Copy> Strided<'_, S> {
    fn at(&self, i: usize, j: usize) -> S {
        self.0[i * self.1 + j * self.2]
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "strided view exceeds its buffer");
    }
}

macro_rules! blas_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: StridedMut<'_, Self>) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    let StridedMut(c, rs, cs) = c;
                    for i in 0..m {
                        for j in 0..n {
                            c[i * rs + j * cs] = if beta == 0.0 { 0.0 } else { beta * c[i * rs + j * cs] };
                        }
                    }
                    return;
                }
                check_extent(a.0.len(), m, k, a.1, a.2);
                check_extent(b.0.len(), k, n, b.1, b.2);
                check_extent(c.0.len(), m, n, c.1, c.2);
                // SAFETY: every index the routine touches was bounds-checked above
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    )
                }
            }
        }
    };
}

blas_scalar!(f32, matrixmultiply::sgemm);
blas_scalar!(f64, matrixmultiply::dgemm);
