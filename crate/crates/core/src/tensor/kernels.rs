//! Raw loops behind the tape primitives. Slices only; shapes are checked by
//! the caller.

use super::Real;

/// Geometry of a stride-1, zero "same"-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfold `x` (`c_in x h x w`) into `cols` (`c_in*k*k x h*w`).
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad() as isize);
    let plane = g.plane();
    for c in 0..g.c_in {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // Valid output columns for this horizontal shift.
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s_lo = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&srow[s_lo..s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `dx`.
pub(crate) fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad() as isize);
    let plane = g.plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dxs = kx as isize - pad;
                let x_lo = (-dxs).max(0) as usize;
                let x_hi = (w as isize - dxs).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s_lo = (x_lo as isize + dxs) as usize;
                    let drow = &mut dst[sy as usize * w + s_lo..sy as usize * w + s_lo + (x_hi - x_lo)];
                    let crow = &src[y * w + x_lo..y * w + x_hi];
                    for (d, &v) in drow.iter_mut().zip(crow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling; `argmax[i]` is the flat input index feeding output `i`.
/// Ties go to the first cell in row-major scan order.
pub(crate) fn max_pool2<T: Real>(f: usize, h: usize, w: usize, x: &[T], out: &mut [T], argmax: &mut [usize]) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = c * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
}

pub(crate) fn upsample_nearest2<T: Real>(f: usize, h: usize, w: usize, x: &[T], out: &mut [T]) {
    let ow = 2 * w;
    for c in 0..f {
        for y in 0..h {
            for xx in 0..w {
                let v = x[c * h * w + y * w + xx];
                let o = c * 4 * h * w + 2 * y * ow + 2 * xx;
                out[o] = v;
                out[o + 1] = v;
                out[o + ow] = v;
                out[o + ow + 1] = v;
            }
        }
    }
}

pub(crate) fn upsample_nearest2_adjoint<T: Real>(f: usize, h: usize, w: usize, g: &[T], dx: &mut [T]) {
    let ow = 2 * w;
    for c in 0..f {
        for y in 0..h {
            for xx in 0..w {
                let o = c * 4 * h * w + 2 * y * ow + 2 * xx;
                dx[c * h * w + y * w + xx] += g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
            }
        }
    }
}

/// Numerically stable softmax of one slice into `out`.
pub(crate) fn softmax<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    let inv = T::one() / total;
    out.iter_mut().for_each(|o| *o = *o * inv);
}

/// `dx += y * (g - <g, y>)` for one softmax slice.
pub(crate) fn softmax_adjoint<T: Real>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d += yi * (gi - dot);
    }
}
