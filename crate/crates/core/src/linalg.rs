//! Dense kernels behind convolution and fully connected layers.
//!
//! All matrices are row-major slices. The three GEMM variants cover the
//! forward pass and both backward products without materializing any
//! transpose. Loop orders keep the innermost axis contiguous so the
//! compiler can vectorize.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T` (rows of `a` dotted with rows of `b`)
pub fn gemm_abt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_atb<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `y[m] += w[m,k] * x[k]`
pub fn matvec_acc<T: Scalar>(m: usize, k: usize, w: &[T], x: &[T], y: &mut [T]) {
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(y.len(), m);
    for (i, yv) in y.iter_mut().enumerate() {
        let row = &w[i * k..(i + 1) * k];
        let mut acc = T::zero();
        for (&wv, &xv) in row.iter().zip(x.iter()) {
            acc = acc + wv * xv;
        }
        *yv = *yv + acc;
    }
}

/// `y[k] += w[m,k]^T * g[m]`
pub fn matvec_t_acc<T: Scalar>(m: usize, k: usize, w: &[T], g: &[T], y: &mut [T]) {
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(y.len(), k);
    for (i, &gv) in g.iter().enumerate() {
        if gv == T::zero() {
            continue;
        }
        let row = &w[i * k..(i + 1) * k];
        for (yv, &wv) in y.iter_mut().zip(row.iter()) {
            *yv = *yv + gv * wv;
        }
    }
}

/// `w[m,k] += g[m] ⊗ x[k]`
pub fn outer_acc<T: Scalar>(m: usize, k: usize, g: &[T], x: &[T], w: &mut [T]) {
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(w.len(), m * k);
    for (i, &gv) in g.iter().enumerate() {
        if gv == T::zero() {
            continue;
        }
        let row = &mut w[i * k..(i + 1) * k];
        for (wv, &xv) in row.iter_mut().zip(x.iter()) {
            *wv = *wv + gv * xv;
        }
    }
}

/// Output spatial size of a convolution along one axis.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x[cin, h, w]` into `col[cin*kh*kw, ho*wo]` for the given geometry.
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut col = vec![T::zero(); cin * kh * kw * ho * wo];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // Contiguous copy of the in-bounds span.
                        let ix0 = kx as isize - pad as isize;
                        let ox_start = (-ix0).max(0) as usize;
                        let ox_end = ((w as isize - ix0).min(wo as isize)).max(0) as usize;
                        if ox_start < ox_end {
                            let src0 = (ix0 + ox_start as isize) as usize;
                            dst_row[ox_start..ox_end]
                                .copy_from_slice(&src_row[src0..src0 + (ox_end - ox_start)]);
                        }
                    } else {
                        for (ox, dst) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *dst = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold gradient columns back onto the input: inverse scatter-add of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(gx.len(), cin * h * w);
    for ci in 0..cin {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
}
