//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use nalgebra::{DMatrix, DVector};
use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point scalar the solvers and models are generic over (`f32`, `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint headers.
    const DTYPE: &'static str;
    /// Width of one little-endian encoded value.
    const BYTES: usize;

    /// Converts an `f64` literal. Never fails for finite input.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn push_le_bytes(self, out: &mut Vec<u8>);

    /// Decodes one value from exactly `Self::BYTES` little-endian bytes.
    fn from_le_slice(bytes: &[u8]) -> Self;

    /// Solves the dense `n x n` system `matrix * x = rhs` (row-major matrix).
    /// Returns `None` when the matrix is singular.
    fn solve_dense(matrix: &[Self], rhs: &[Self], n: usize) -> Option<Vec<Self>>;
}

macro_rules! impl_real {
    ($t:ty, $name:literal) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn push_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }

            fn solve_dense(matrix: &[Self], rhs: &[Self], n: usize) -> Option<Vec<Self>> {
                let a = DMatrix::from_row_slice(n, n, matrix);
                let b = DVector::from_column_slice(rhs);
                a.lu().solve(&b).map(|x| x.iter().copied().collect())
            }
        }
    };
}

impl_real!(f32, "f32");
impl_real!(f64, "f64");

/// Sup-norm distance between two equally sized vectors.
pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc.max((x - y).abs()))
}
