//! Dense row-major kernels used by the hand-written layers.
//!
//! Shapes are passed explicitly; all matrices are contiguous slices.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_abt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (j, o) in or.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out[n×k] += dy[m×n]ᵀ · x[m×k]` (weight gradient of `y = x Wᵀ`).
pub fn gemm_atb<T: Scalar>(dy: &[T], x: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        for j in 0..n {
            let g = dy[i * n + j];
            if g == T::zero() {
                continue;
            }
            let or = &mut out[j * k..(j + 1) * k];
            for (o, &v) in or.iter_mut().zip(xr) {
                *o += g * v;
            }
        }
    }
}

/// `out[m×k] += dy[m×n] · w[n×k]` (input gradient of `y = x Wᵀ`).
pub fn gemm_ab<T: Scalar>(dy: &[T], w: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let or = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let g = dy[i * n + j];
            if g == T::zero() {
                continue;
            }
            let wr = &w[j * k..(j + 1) * k];
            for (o, &v) in or.iter_mut().zip(wr) {
                *o += g * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_products() {
        // a: 2×3, b: 4×3
        let a = [1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let b = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let mut out = vec![0.0; 8];
        gemm_abt(&a, &b, 2, 3, 4, &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 6.0, -1.0, 0.5, 2.0, 1.5]);

        let dy = [1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let mut dw = vec![0.0; 12];
        gemm_atb(&dy, &a, 2, 4, 3, &mut dw);
        // row 0 of dw = 1·a0 + 0·a1
        assert_eq!(&dw[0..3], &[1.0, 2.0, 3.0]);
        // row 1 = 2·a0 + 1·a1
        assert_eq!(&dw[3..6], &[1.0, 4.5, 8.0]);

        let mut dx = vec![0.0; 6];
        gemm_ab(&dy, &b, 2, 4, 3, &mut dx);
        assert_eq!(dx, vec![2.0, 3.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
