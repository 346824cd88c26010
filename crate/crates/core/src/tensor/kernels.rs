//! Plain matrix kernels. All accumulate into `c`.

use crate::scalar::Scalar;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Runs the body through an AVX2-enabled copy when the CPU has it, so the
/// inner loops vectorize eight lanes wide without a target-cpu build flag.
macro_rules! dispatch {
    ($generic:ident, $wide:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $wide<T: Scalar>($($arg: $ty),*) {
            $generic($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            return unsafe { $wide($($arg),*) };
        }
        $generic($($arg),*)
    };
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    dispatch!(gemm_nn_body, gemm_nn_avx2, (a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize));
}

#[inline(always)]
fn gemm_nn_body<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (cj, &bv) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += a_ip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    dispatch!(gemm_nt_body, gemm_nt_avx2, (a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize));
}

#[inline(always)]
fn gemm_nt_body<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    // a transposed copy of b turns this into the row-streaming kernel
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn_body(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[p,m]ᵀ · b[p,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, m: usize, n: usize) {
    dispatch!(gemm_tn_body, gemm_tn_avx2, (a: &[T], b: &[T], c: &mut [T], p: usize, m: usize, n: usize));
}

#[inline(always)]
fn gemm_tn_body<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, m: usize, n: usize) {
    let mut r = 0;
    while r + 4 <= p {
        let (b0, b1, b2, b3) = (
            &b[r * n..(r + 1) * n],
            &b[(r + 1) * n..(r + 2) * n],
            &b[(r + 2) * n..(r + 3) * n],
            &b[(r + 3) * n..(r + 4) * n],
        );
        for i in 0..m {
            let (a0, a1, a2, a3) = (
                a[r * m + i],
                a[(r + 1) * m + i],
                a[(r + 2) * m + i],
                a[(r + 3) * m + i],
            );
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
        }
        r += 4;
    }
    for r in r..p {
        let b_row = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let a_ri = a[r * m + i];
            for (cj, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *cj += a_ri * bv;
            }
        }
    }
}
