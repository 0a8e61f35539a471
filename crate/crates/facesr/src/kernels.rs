//! Low-level numeric kernels: small GEMM variants and the im2col/col2im
//! machinery behind convolution and transposed convolution.
//!
//! Accumulation order is fixed (row-major loops, no reassociation), so all
//! results are bit-deterministic for identical inputs.

use crate::tensor::Real;

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T` (dot products over the shared `k` axis).
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            if aki == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aki * brow[j];
            }
        }
    }
}

/// Spatial geometry of one conv: input `(h, w)`, kernel `k`, stride, pad.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution; `None` if `(h + 2p - k)` is
    /// negative or not divisible by the stride.
    pub fn conv(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let num_h = (h + 2 * pad).checked_sub(k)?;
        let num_w = (w + 2 * pad).checked_sub(k)?;
        if num_h % stride != 0 || num_w % stride != 0 {
            return None;
        }
        Some(ConvGeom {
            h,
            w,
            k,
            stride,
            pad,
            out_h: num_h / stride + 1,
            out_w: num_w / stride + 1,
        })
    }

    /// Output size of a transposed convolution on an `(h, w)` input.
    pub fn conv_transpose_out(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad)
    }
}

/// Unfolds one sample `[c, h, w]` into `col[c*k*k, out_h*out_w]`;
/// out-of-bounds taps read as zero.
pub fn im2col<T: Real>(input: &[T], c: usize, g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let cols = g.out_h * g.out_w;
    debug_assert_eq!(col.len(), c * k * k * cols);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let base = oh * g.out_w;
                    if ih < 0 || ih >= h as isize {
                        dst[base..base + g.out_w].iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let irow = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[base + ow] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            irow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-accumulates `col` back into an image.
pub fn col2im<T: Real>(col: &[T], c: usize, g: &ConvGeom, image: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let cols = g.out_h * g.out_w;
    debug_assert_eq!(col.len(), c * k * k * cols);
    debug_assert_eq!(image.len(), c * h * w);
    for ch in 0..c {
        let plane = &mut image[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let irow = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let base = oh * g.out_w;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            irow[iw as usize] += src[base + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    want[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, want);

        // b^T laid out as [n, k]
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T laid out as [k, m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::conv(5, 5, 3, 1, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (5, 5));
        let g = ConvGeom::conv(5, 5, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
        assert!(ConvGeom::conv(5, 5, 3, 3, 1).is_none()); // (5+2-3) % 3 != 0
        assert_eq!(ConvGeom::conv_transpose_out(8, 8, 4, 2, 1), (16, 16));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom::conv(4, 5, 3, 2, 1).unwrap();
        let c = 2;
        let x: Vec<f64> = (0..c * g.h * g.w).map(|i| (i as f64 * 0.13).sin()).collect();
        let ncol = c * g.k * g.k * g.out_h * g.out_w;
        let y: Vec<f64> = (0..ncol).map(|i| (i as f64 * 0.29).cos()).collect();

        let mut cx = vec![0.0; ncol];
        im2col(&x, c, &g, &mut cx);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut xy = vec![0.0; c * g.h * g.w];
        col2im(&y, c, &g, &mut xy);
        let rhs: f64 = x.iter().zip(&xy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
