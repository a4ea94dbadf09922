//! Forward and backward kernels over raw row-major buffers.
//!
//! The graph layer owns shapes and bookkeeping; everything here is plain
//! loops and GEMM calls on slices.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
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

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
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

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    let ck = g.patch();
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.cout, ck, p, T::one(), weight, (ck as isize, 1), cols_ref, (p as isize, 1), beta, ob, (p as isize, 1));
    }
    out
}

/// Accumulates gradients into `dx`, `dweight` and `dbias` (any may be absent).
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let p = g.out_h() * g.out_w();
    let ck = g.patch();
    if let Some(db) = dbias {
        for b in 0..g.batch {
            for (co, row) in dy[b * g.cout * p..(b + 1) * g.cout * p].chunks(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { ck * p }];
    if let Some(dw) = dweight {
        for b in 0..g.batch {
            let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
            let cols_ref: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            let dyb = &dy[b * g.cout * p..(b + 1) * g.cout * p];
            // dW[cout, ck] += dY[cout, p] * cols^T[p, ck]
            T::gemm(g.cout, p, ck, T::one(), dyb, (p as isize, 1), cols_ref, (1, p as isize), T::one(), dw, (ck as isize, 1));
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); ck * p];
        for b in 0..g.batch {
            let dyb = &dy[b * g.cout * p..(b + 1) * g.cout * p];
            let dxb = &mut dx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                T::gemm(g.cin, g.cout, p, T::one(), weight, (1, ck as isize), dyb, (p as isize, 1), T::one(), dxb, (p as isize, 1));
            } else {
                T::gemm(ck, g.cout, p, T::one(), weight, (1, ck as isize), dyb, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                col2im(g, &dcols, dxb);
            }
        }
    }
}

/// Source taps for one output coordinate of an align-corners=false resize.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w1: T,
}

pub fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            Tap { i0, i1, w1: T::from_f64_lossy(src - i0 as f64) }
        })
        .collect()
}

pub fn resample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let wy0 = T::one() - ry.w1;
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let wx0 = T::one() - rx.w1;
                let top = wx0 * r0[rx.i0] + rx.w1 * r0[rx.i1];
                let bot = wx0 * r1[rx.i0] + rx.w1 * r1[rx.i1];
                dst[oy * ow + ox] = wy0 * top + ry.w1 * bot;
            }
        }
    }
    out
}

pub fn resample_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    if oh == h && ow == w {
        for (d, g) in dx.iter_mut().zip(dy) {
            *d += *g;
        }
        return;
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let wy0 = T::one() - ry.w1;
            for (ox, rx) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let wx0 = T::one() - rx.w1;
                dst[ry.i0 * w + rx.i0] += g * wy0 * wx0;
                dst[ry.i0 * w + rx.i1] += g * wy0 * rx.w1;
                dst[ry.i1 * w + rx.i0] += g * ry.w1 * wx0;
                dst[ry.i1 * w + rx.i1] += g * ry.w1 * rx.w1;
            }
        }
    }
}

/// Window maxima plus the flat input index of each winner (first in
/// row-major order on ties).
pub fn max_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Softmax over the middle axis of an `outer × len × inner` view.
pub fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize, dx: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[idx(j)] * dy[idx(j)]).sum();
            for j in 0..len {
                dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - dot);
            }
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per-channel statistics over batch and spatial extent.
/// Neumaier-compensated sum. Long reductions feeding scalar losses use this
/// so that their rounding error stays near one ulp of the result.
pub fn compensated_sum<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut carry = T::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub fn channel_mean_var<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(b * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |bi: usize| &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
        let m = compensated_sum((0..b).flat_map(|bi| plane(bi).iter().copied())) / n;
        let v = compensated_sum((0..b).flat_map(|bi| plane(bi).iter().map(move |&val| (val - m) * (val - m))));
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1.0, 1e-16, 1e-16, 1e-16, 1e-16, -1.0];
        assert_eq!(compensated_sum(v.iter().copied()), 4e-16);
        assert_eq!(v.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn taps_identity_and_constant() {
        let t = bilinear_taps::<f64>(4, 4);
        for (o, tap) in t.iter().enumerate() {
            assert_eq!(tap.i0, o);
            assert_eq!(tap.w1, 0.0);
        }
        // 2 -> 4: sources -0.25(clamped 0), 0.25, 0.75, 1.25
        let t = bilinear_taps::<f64>(2, 4);
        assert_eq!((t[0].i0, t[0].w1), (0, 0.0));
        assert_eq!((t[1].i0, t[1].w1), (0, 0.25));
        assert_eq!((t[2].i0, t[2].w1), (0, 0.75));
        assert_eq!((t[3].i0, t[3].i1), (1, 1));
    }

    #[test]
    fn pool_tie_break_is_first_index() {
        let (v, a) = max_pool_forward(&[2.0f64, 2.0, 2.0, 2.0], 1, 2, 2, 2, 2);
        assert_eq!(v, vec![2.0]);
        assert_eq!(a, vec![0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
    }
}
