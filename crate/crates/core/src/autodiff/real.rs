use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Strided view of a row-major-or-transposed matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix, seen as `cols x rows`.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// Floating point element type of tensors. Implemented for `f32` (training)
/// and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Size tag written into checkpoints.
    const BYTES: u8;

    /// `c = alpha * a * b + beta * c` where `c` is row-major `a.rows x b.cols`.
    fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]);

    fn from_f64_lossy(x: f64) -> Self;

    fn to_le_bytes_vec(data: &[Self], out: &mut Vec<u8>);

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

fn check_gemm<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c_len: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert!(c_len >= a.rows * b.cols, "gemm output too small");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $bytes:expr) => {
        impl Real for $t {
            const BYTES: u8 = $bytes;

            fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]) {
                check_gemm(&a, &b, c.len());
                let (m, k, n) = (a.rows, a.cols, b.cols);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: `check_gemm` verified every strided access of a, b and c
                // stays inside the borrowed slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64_lossy(x: f64) -> Self {
                x as $t
            }

            fn to_le_bytes_vec(data: &[Self], out: &mut Vec<u8>) {
                out.reserve(data.len() * $bytes);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($bytes)
                    .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk size")))
                    .collect()
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, 4);
impl_real!(f64, matrixmultiply::dgemm, 8);

/// Shorthand for converting an `f64` constant into `T`.
#[inline]
pub fn cst<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}
