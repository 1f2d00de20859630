//! Dense CPU kernels behind the graph ops. All loops run in a fixed order so
//! results are bit-reproducible.

use super::tensor::Element;

/// `c = a · b + beta · c`, where `a` is `m×k` (or stored `k×m` when
/// `trans_a`) and `b` is `k×n` (or stored `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents were checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[n, c, h, wd], &[o, ci, kh, kw]) = (x, w) else {
            return None;
        };
        if ci != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    /// A 1×1 stride-1 unpadded convolution reads the input plane directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose tap `kj` lands inside a row of width `w`.
#[inline]
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gathers one sample's receptive fields into a `(c·kh·kw) × (oh·ow)` matrix.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into one sample's input gradient.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let first = iy as usize * g.w + lo * g.stride + kj - g.pad;
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &s) in dxc[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for s in 0..g.n {
        let xs = &x[s * g.in_sample()..(s + 1) * g.in_sample()];
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let os = &mut out[s * g.o * plane..(s + 1) * g.o * plane];
        gemm(g.o, g.patch_len(), plane, w, false, patches, false, T::zero(), os);
    }
    out
}

/// Returns `(dx, dw)` for `upstream` of shape `(n, o, oh, ow)`.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    upstream: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); klen * plane];
    let mut dcols = vec![T::zero(); klen * plane];
    for s in 0..g.n {
        let xs = &x[s * g.in_sample()..(s + 1) * g.in_sample()];
        let us = &upstream[s * g.o * plane..(s + 1) * g.o * plane];
        if let Some(dw) = dw.as_mut() {
            let patches: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW(o, klen) += dY(o, plane) · patchesᵀ(plane, klen)
            gemm(g.o, plane, klen, us, false, patches, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * g.in_sample()..(s + 1) * g.in_sample()];
            if g.is_pointwise() {
                gemm(klen, g.o, plane, w, true, us, false, T::zero(), dxs);
            } else {
                gemm(klen, g.o, plane, w, true, us, false, T::zero(), &mut dcols);
                col2im(g, &dcols, dxs);
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping `k×k` max pooling; returns output and flat argmax indices.
pub(crate) fn maxpool_forward<T: Element>(shape: &[usize], k: usize, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        let xp = &x[base..base + h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        let ap = &mut arg[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let orow = &mut op[oy * ow..(oy + 1) * ow];
            let arow = &mut ap[oy * ow..(oy + 1) * ow];
            // seed with the window's top-left element, then scan rows in order
            let top = oy * k * w;
            for ox in 0..ow {
                orow[ox] = xp[top + ox * k];
                arow[ox] = (top + ox * k) as u32;
            }
            for dy in 0..k {
                let start = (oy * k + dy) * w;
                let row = &xp[start..start + ow * k];
                for (ox, win) in row.chunks_exact(k).enumerate() {
                    for (dx, &v) in win.iter().enumerate() {
                        if v > orow[ox] {
                            orow[ox] = v;
                            arow[ox] = (start + ox * k + dx) as u32;
                        }
                    }
                }
            }
        }
        for a in ap.iter_mut() {
            *a += base as u32;
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward<T: Element>(shape: &[usize], k: usize, x: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::of(1.0 / (k * k) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc = acc + x[base + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Element>(shape: &[usize], k: usize, upstream: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::of(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = upstream[(plane * oh + oy) * ow + ox] * inv;
                for dy in 0..k {
                    for dx_ in 0..k {
                        dx[base + (oy * k + dy) * w + ox * k + dx_] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Channel layout of a batch-norm input `(n, c, spatial...)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelLayout {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> Option<Self> {
        if shape.len() < 2 {
            return None;
        }
        Some(ChannelLayout {
            n: shape[0],
            c: shape[1],
            inner: shape[2..].iter().product(),
        })
    }

    pub fn count(&self) -> usize {
        self.n * self.inner
    }

    /// Visits every element of channel `ch` in (sample, position) order.
    #[inline]
    pub fn for_channel(&self, ch: usize, mut f: impl FnMut(usize)) {
        for s in 0..self.n {
            let base = (s * self.c + ch) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

/// Per-channel biased mean and variance.
pub(crate) fn channel_moments<T: Element>(l: &ChannelLayout, x: &[T]) -> (Vec<T>, Vec<T>) {
    let inv = T::of(1.0 / l.count() as f64);
    let mut mean = vec![T::zero(); l.c];
    let mut var = vec![T::zero(); l.c];
    for ch in 0..l.c {
        let mut acc = T::zero();
        l.for_channel(ch, |i| acc = acc + x[i]);
        let m = acc * inv;
        let mut sq = T::zero();
        l.for_channel(ch, |i| {
            let d = x[i] - m;
            sq = sq + d * d;
        });
        mean[ch] = m;
        var[ch] = sq * inv;
    }
    (mean, var)
}
