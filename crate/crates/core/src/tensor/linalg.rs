//! Matrix kernels used by the tape ops.
//!
//! Output rows are computed independently and each element is reduced in a
//! fixed order, so splitting rows across rayon workers never changes the
//! result.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

fn parallel(m: usize, k: usize, n: usize) -> bool {
    m > 1 && m.saturating_mul(k).saturating_mul(n) >= PAR_THRESHOLD
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += aik * bv;
            }
        }
    };
    if parallel(m, k, n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if parallel(m, k, n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [f64])| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += aki * bv;
            }
        }
    };
    if parallel(m, k, n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}
