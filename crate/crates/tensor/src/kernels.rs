//! Raw loops behind the differentiable ops. All layouts are NCHW row-major.

use crate::scalar::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npix = ho * wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npix = ho * wo;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], batch: usize, wt: &[T], g: &ConvGeom) -> Vec<T> {
    let npix = g.out_h() * g.out_w();
    let k = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * npix;
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * npix] };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(g.cout, k, npix, wt, false, cols, false, &mut out[b * out_len..(b + 1) * out_len], false);
    }
    out
}

/// Returns `(dx, dw)`; either can be skipped.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    wt: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let npix = g.out_h() * g.out_w();
    let k = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * npix;
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * k]);
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * npix] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); k * npix] };
    for b in 0..batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let cols: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dW[cout, k] += dY[cout, npix] · colᵀ[npix, k]
            gemm(g.cout, npix, k, dyb, false, cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(k, g.cout, npix, wt, true, dyb, false, dxb, true);
            } else {
                gemm(k, g.cout, npix, wt, true, dyb, false, &mut dcol, false);
                col2im(&dcol, g, dxb);
            }
        }
    }
    (dx, dw)
}

pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    out
}

/// 2×2 mean pooling; `h` and `w` are the input sizes and must be even.
pub fn avgpool2x2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                dst[y * w2 + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
            }
        }
    }
    out
}

pub fn avgpool2x2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * w2 + xx / 2] * q;
            }
        }
    }
    out
}
