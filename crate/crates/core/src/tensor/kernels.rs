//! Single-threaded kernels. Matmuls go through `matrixmultiply` without its
//! threading feature, so results do not depend on thread count.

use super::Element;

const LANES: usize = 8;

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check(len: usize, rows: usize, cols: usize) {
    assert!(len >= rows * cols, "gemm operand holds {len} values, needs {}", rows * cols);
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), m, k);
    check(b.len(), k, n);
    check(c.len(), m, n);
    let (k_, n_) = (k as isize, n as isize);
    T::gemm(m, k, n, a, (k_, 1), b, (n_, 1), c, (n_, 1));
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), m, k);
    check(b.len(), n, k);
    check(c.len(), m, n);
    let (k_, n_) = (k as isize, n as isize);
    T::gemm(m, k, n, a, (k_, 1), b, (1, k_), c, (n_, 1));
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), k, m);
    check(b.len(), k, n);
    check(c.len(), m, n);
    let (m_, n_) = (m as isize, n as isize);
    T::gemm(m, k, n, a, (1, m_), b, (n_, 1), c, (n_, 1));
}
