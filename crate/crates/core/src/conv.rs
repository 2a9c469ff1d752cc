//! im2col / col2im kernels backing convolution and transposed convolution.

use crate::real::Real;

/// Geometry of a square-kernel 2-D convolution over a `(cin, h, w)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom { cin, h, w, k, stride, pad, ho, wo }
    }

    /// Rows of the column matrix.
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded convolution whose column matrix is the input.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// For each kernel offset, the valid output range along one axis:
    /// output index `o` reads input `o * stride + off - pad`.
    #[inline]
    fn valid_range(&self, off: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.pad as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= len_in - 1
        let hi_num = len_in as isize - 1 - shift;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, len_out as isize) as usize;
        (lo.min(hi), hi)
    }
}

/// `cols[(c*k + ky)*k + kx][oy*wo + ox] = x[c][oy*s + ky - p][ox*s + kx - p]`, zero outside.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * g.out_pixels());
    let np = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column entries back into `x`.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * g.out_pixels());
    let np = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], wts: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * g.ho * g.wo];
        for o in 0..cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[(c * g.h + iy as usize) * g.w + ix as usize];
                                acc += xv * wts[((o * g.cin + c) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(k, s, p, h, w) in &[(5, 2, 2, 9, 7), (3, 1, 1, 5, 6), (1, 1, 0, 3, 3), (5, 2, 2, 8, 8)] {
            let g = ConvGeom::new(2, h, w, k, s, p);
            let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
            let cout = 3;
            let wts: Vec<f64> = (0..cout * g.col_rows()).map(|i| ((i * 31) % 7) as f64 - 3.0).collect();
            let mut cols = vec![0.0; g.col_rows() * g.out_pixels()];
            im2col(&g, &x, &mut cols);
            let mut out = vec![0.0; cout * g.out_pixels()];
            crate::real::matmul(cout, g.col_rows(), g.out_pixels(), &wts, false, &cols, false, &mut out, false);
            assert_eq!(out, naive_conv(&g, &x, &wts, cout));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 7, 6, 5, 2, 2);
        let x: Vec<f64> = (0..2 * 7 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.out_pixels()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut ax = vec![0.0; c.len()];
        im2col(&g, &x, &mut ax);
        let mut atc = vec![0.0; x.len()];
        col2im(&g, &c, &mut atc);
        let lhs: f64 = ax.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atc).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
