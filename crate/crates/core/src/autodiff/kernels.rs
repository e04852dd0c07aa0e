//! Forward kernels shared by the differentiable graph and the incremental
//! inference path.

use super::real::{MatRef, Real};

/// Numerically stable in-place softmax over one contiguous row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place log-softmax over one contiguous row.
pub fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let shift = max + sum.ln();
    for v in row.iter_mut() {
        *v -= shift;
    }
}

/// Normalizes each row of `x` (length `dim`) into `out`, writing the
/// pre-affine normalized values into `xhat` and the reciprocal std into `rstd`
/// when provided.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    dim: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    mut xhat: Option<&mut [T]>,
    mut rstd: Option<&mut [T]>,
) {
    let n = T::from_usize(dim).expect("dim");
    for (r, (row, orow)) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let denom = (var + eps).sqrt();
        // A zero-variance row with eps = 0 normalizes to zeros instead of NaN.
        let inv = if denom > T::zero() { T::one() / denom } else { T::zero() };
        if let Some(rs) = rstd.as_deref_mut() {
            rs[r] = inv;
        }
        for j in 0..dim {
            let h = (row[j] - mean) * inv;
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * dim + j] = h;
            }
            orow[j] = h * gain[j] + bias[j];
        }
    }
}

/// `out = x * w + b` for row-major `x: [rows, din]`, `w: [din, dout]`.
pub fn linear<T: Real>(x: &[T], rows: usize, din: usize, w: &[T], dout: usize, b: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(T::one(), MatRef::new(x, rows, din), MatRef::new(w, din, dout), beta, &mut out);
    out
}

/// Sinusoidal position encoding row for `pos` with width `dim`.
pub fn position_encoding<T: Real>(pos: usize, dim: usize, out: &mut [T]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * (2 * i) as f64 / dim as f64).exp();
        let angle = pos as f64 * freq;
        out[2 * i] = T::from_f64_lossy(angle.sin());
        out[2 * i + 1] = T::from_f64_lossy(angle.cos());
    }
    if dim % 2 == 1 {
        out[dim - 1] = T::zero();
    }
}
