//! Dense matrix kernels.
//!
//! Every output element is accumulated over the contraction index in ascending order,
//! independent of how many rows are processed together. Running one row at a time and
//! running a whole batch therefore give bit-identical results.

const ROW_BLOCK: usize = 8;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i0 = 0;
    while i0 < m {
        let i1 = (i0 + ROW_BLOCK).min(m);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for i in i0..i1 {
                let a_ip = a[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in o.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
        i0 = i1;
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o = &mut out[i * k..(i + 1) * k];
        // four independent dot products at a time; each still sums in ascending order
        let mut p = 0;
        while p + 4 <= k {
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                let x = a_row[j];
                s0 += x * b0[j];
                s1 += x * b1[j];
                s2 += x * b2[j];
                s3 += x * b3[j];
            }
            o[p] += s0;
            o[p + 1] += s1;
            o[p + 2] += s2;
            o[p + 3] += s3;
            p += 4;
        }
        for p in p..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            o[p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}
