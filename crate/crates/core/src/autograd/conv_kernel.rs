//! Direct 1D convolution kernels (forward, input gradient, weight gradient).
//!
//! A same-padded 1D convolution decomposes into shifted AXPY and dot
//! operations over contiguous slices: for each (output channel, input
//! channel, tap) triple the kernel streams one fused multiply-add over the
//! overlap of the two signals, so zero padding costs nothing and no im2col
//! buffer exists. The slice primitives are multiversioned (scalar, AVX2,
//! AVX-512) and dispatched once per process by CPU detection; every path
//! keeps a fixed summation order, so results are reproducible run to run on
//! a given machine.
//!
//! Layouts are row-major: signals `[C][N]`, weights `[C_out][C_in][K]`,
//! batched tensors `[B][C][N]`. Even kernel widths pad `(K-1)/2` on the left.

use std::sync::OnceLock;

use crate::parallel;

/// Instruction-set level the slice primitives run at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimdLevel {
    Scalar,
    Avx2,
    Avx512,
}

/// The level picked for this process (detected once).
pub fn active_simd() -> SimdLevel {
    static LEVEL: OnceLock<SimdLevel> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return SimdLevel::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return SimdLevel::Avx2;
            }
        }
        SimdLevel::Scalar
    })
}

fn axpy_scalar(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

fn dot_scalar(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn axpy_avx2(dst: &mut [f64], a: f64, src: &[f64]) {
        let n = dst.len();
        let dp = dst.as_mut_ptr();
        let sp = src.as_ptr();
        let va = _mm256_set1_pd(a);
        let mut i = 0;
        while i + 8 <= n {
            let d0 = _mm256_loadu_pd(dp.add(i));
            let d1 = _mm256_loadu_pd(dp.add(i + 4));
            let s0 = _mm256_loadu_pd(sp.add(i));
            let s1 = _mm256_loadu_pd(sp.add(i + 4));
            _mm256_storeu_pd(dp.add(i), _mm256_fmadd_pd(va, s0, d0));
            _mm256_storeu_pd(dp.add(i + 4), _mm256_fmadd_pd(va, s1, d1));
            i += 8;
        }
        while i < n {
            *dp.add(i) += a * *sp.add(i);
            i += 1;
        }
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let mut acc3 = _mm256_setzero_pd();
        let mut i = 0;
        while i + 16 <= n {
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(i)), _mm256_loadu_pd(bp.add(i)), acc0);
            acc1 = _mm256_fmadd_pd(
                _mm256_loadu_pd(ap.add(i + 4)),
                _mm256_loadu_pd(bp.add(i + 4)),
                acc1,
            );
            acc2 = _mm256_fmadd_pd(
                _mm256_loadu_pd(ap.add(i + 8)),
                _mm256_loadu_pd(bp.add(i + 8)),
                acc2,
            );
            acc3 = _mm256_fmadd_pd(
                _mm256_loadu_pd(ap.add(i + 12)),
                _mm256_loadu_pd(bp.add(i + 12)),
                acc3,
            );
            i += 16;
        }
        let acc = _mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3));
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), acc);
        let mut sum = lanes[0] + lanes[1] + lanes[2] + lanes[3];
        while i < n {
            sum += *ap.add(i) * *bp.add(i);
            i += 1;
        }
        sum
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn axpy_avx512(dst: &mut [f64], a: f64, src: &[f64]) {
        let n = dst.len();
        let dp = dst.as_mut_ptr();
        let sp = src.as_ptr();
        let va = _mm512_set1_pd(a);
        let mut i = 0;
        while i + 16 <= n {
            let d0 = _mm512_loadu_pd(dp.add(i));
            let d1 = _mm512_loadu_pd(dp.add(i + 8));
            let s0 = _mm512_loadu_pd(sp.add(i));
            let s1 = _mm512_loadu_pd(sp.add(i + 8));
            _mm512_storeu_pd(dp.add(i), _mm512_fmadd_pd(va, s0, d0));
            _mm512_storeu_pd(dp.add(i + 8), _mm512_fmadd_pd(va, s1, d1));
            i += 16;
        }
        while i + 8 <= n {
            let d0 = _mm512_loadu_pd(dp.add(i));
            let s0 = _mm512_loadu_pd(sp.add(i));
            _mm512_storeu_pd(dp.add(i), _mm512_fmadd_pd(va, s0, d0));
            i += 8;
        }
        while i < n {
            *dp.add(i) += a * *sp.add(i);
            i += 1;
        }
    }

    /// Register-blocked interior forward for one output row: accumulates
    /// every (input channel, tap) product for 32 consecutive output
    /// positions in registers and stores once. `yo[t0..t0+32]` must hold the
    /// bias, and all taps must be in bounds for `t0..t0+32` (interior tile).
    #[target_feature(enable = "avx512f", enable = "fma")]
    pub unsafe fn fwd_tile32_avx512(
        x: *const f64,
        n: usize,
        c_in: usize,
        w_row: *const f64,
        k: usize,
        pl: usize,
        yo: *mut f64,
        t0: usize,
    ) {
        let y = yo.add(t0);
        let mut a0 = _mm512_loadu_pd(y);
        let mut a1 = _mm512_loadu_pd(y.add(8));
        let mut a2 = _mm512_loadu_pd(y.add(16));
        let mut a3 = _mm512_loadu_pd(y.add(24));
        for c in 0..c_in {
            let xbase = x.add(c * n + t0 - pl);
            let wbase = w_row.add(c * k);
            for kk in 0..k {
                let wv = _mm512_set1_pd(*wbase.add(kk));
                let xp = xbase.add(kk);
                a0 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(xp), a0);
                a1 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(xp.add(8)), a1);
                a2 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(xp.add(16)), a2);
                a3 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(xp.add(24)), a3);
            }
        }
        _mm512_storeu_pd(y, a0);
        _mm512_storeu_pd(y.add(8), a1);
        _mm512_storeu_pd(y.add(16), a2);
        _mm512_storeu_pd(y.add(24), a3);
    }

    /// 16-wide AVX2 variant of [`fwd_tile32_avx512`].
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn fwd_tile16_avx2(
        x: *const f64,
        n: usize,
        c_in: usize,
        w_row: *const f64,
        k: usize,
        pl: usize,
        yo: *mut f64,
        t0: usize,
    ) {
        let y = yo.add(t0);
        let mut a0 = _mm256_loadu_pd(y);
        let mut a1 = _mm256_loadu_pd(y.add(4));
        let mut a2 = _mm256_loadu_pd(y.add(8));
        let mut a3 = _mm256_loadu_pd(y.add(12));
        for c in 0..c_in {
            let xbase = x.add(c * n + t0 - pl);
            let wbase = w_row.add(c * k);
            for kk in 0..k {
                let wv = _mm256_set1_pd(*wbase.add(kk));
                let xp = xbase.add(kk);
                a0 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(xp), a0);
                a1 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(xp.add(4)), a1);
                a2 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(xp.add(8)), a2);
                a3 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(xp.add(12)), a3);
            }
        }
        _mm256_storeu_pd(y, a0);
        _mm256_storeu_pd(y.add(4), a1);
        _mm256_storeu_pd(y.add(8), a2);
        _mm256_storeu_pd(y.add(12), a3);
    }

    /// Register-blocked interior input-gradient for one input channel:
    /// `dxc[t] += sum_{o,kk} w[(o*c_in+c)*k+kk] * dy[o*n + t + pl - kk]`
    /// over 32 positions, all taps in bounds.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f", enable = "fma")]
    pub unsafe fn gin_tile32_avx512(
        dy: *const f64,
        n: usize,
        c_in: usize,
        c_out: usize,
        w: *const f64,
        k: usize,
        pl: usize,
        c: usize,
        dxc: *mut f64,
        t0: usize,
    ) {
        let d = dxc.add(t0);
        let mut a0 = _mm512_loadu_pd(d);
        let mut a1 = _mm512_loadu_pd(d.add(8));
        let mut a2 = _mm512_loadu_pd(d.add(16));
        let mut a3 = _mm512_loadu_pd(d.add(24));
        for o in 0..c_out {
            let wbase = w.add((o * c_in + c) * k);
            let dybase = dy.add(o * n + t0 + pl);
            for kk in 0..k {
                let wv = _mm512_set1_pd(*wbase.add(kk));
                let dp = dybase.sub(kk);
                a0 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(dp), a0);
                a1 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(dp.add(8)), a1);
                a2 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(dp.add(16)), a2);
                a3 = _mm512_fmadd_pd(wv, _mm512_loadu_pd(dp.add(24)), a3);
            }
        }
        _mm512_storeu_pd(d, a0);
        _mm512_storeu_pd(d.add(8), a1);
        _mm512_storeu_pd(d.add(16), a2);
        _mm512_storeu_pd(d.add(24), a3);
    }

    /// 16-wide AVX2 variant of [`gin_tile32_avx512`].
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gin_tile16_avx2(
        dy: *const f64,
        n: usize,
        c_in: usize,
        c_out: usize,
        w: *const f64,
        k: usize,
        pl: usize,
        c: usize,
        dxc: *mut f64,
        t0: usize,
    ) {
        let d = dxc.add(t0);
        let mut a0 = _mm256_loadu_pd(d);
        let mut a1 = _mm256_loadu_pd(d.add(4));
        let mut a2 = _mm256_loadu_pd(d.add(8));
        let mut a3 = _mm256_loadu_pd(d.add(12));
        for o in 0..c_out {
            let wbase = w.add((o * c_in + c) * k);
            let dybase = dy.add(o * n + t0 + pl);
            for kk in 0..k {
                let wv = _mm256_set1_pd(*wbase.add(kk));
                let dp = dybase.sub(kk);
                a0 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(dp), a0);
                a1 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(dp.add(4)), a1);
                a2 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(dp.add(8)), a2);
                a3 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(dp.add(12)), a3);
            }
        }
        _mm256_storeu_pd(d, a0);
        _mm256_storeu_pd(d.add(4), a1);
        _mm256_storeu_pd(d.add(8), a2);
        _mm256_storeu_pd(d.add(12), a3);
    }

    /// Interior weight-gradient for one (output, input) channel pair and one
    /// block of up to 8 taps: `dw[kk] += sum_t dy[t] * x[t + kk]` with `x`
    /// already offset so tap 0 reads `x[0]` at `t = 0`. All reads in bounds.
    #[target_feature(enable = "avx512f", enable = "fma")]
    pub unsafe fn gwt_taps8_avx512(dy: *const f64, len: usize, x: *const f64, dw: *mut f64) {
        let mut acc = _mm512_setzero_pd();
        for t in 0..len {
            let dyv = _mm512_set1_pd(*dy.add(t));
            acc = _mm512_fmadd_pd(dyv, _mm512_loadu_pd(x.add(t)), acc);
        }
        let sum = _mm512_add_pd(_mm512_loadu_pd(dw), acc);
        _mm512_storeu_pd(dw, sum);
    }

    /// Four-block AVX-512 variant: 32 consecutive taps per pass.
    #[target_feature(enable = "avx512f", enable = "fma")]
    pub unsafe fn gwt_taps32_avx512(dy: *const f64, len: usize, x: *const f64, dw: *mut f64) {
        let mut a0 = _mm512_setzero_pd();
        let mut a1 = _mm512_setzero_pd();
        let mut a2 = _mm512_setzero_pd();
        let mut a3 = _mm512_setzero_pd();
        for t in 0..len {
            let dyv = _mm512_set1_pd(*dy.add(t));
            let xp = x.add(t);
            a0 = _mm512_fmadd_pd(dyv, _mm512_loadu_pd(xp), a0);
            a1 = _mm512_fmadd_pd(dyv, _mm512_loadu_pd(xp.add(8)), a1);
            a2 = _mm512_fmadd_pd(dyv, _mm512_loadu_pd(xp.add(16)), a2);
            a3 = _mm512_fmadd_pd(dyv, _mm512_loadu_pd(xp.add(24)), a3);
        }
        _mm512_storeu_pd(dw, _mm512_add_pd(_mm512_loadu_pd(dw), a0));
        _mm512_storeu_pd(dw.add(8), _mm512_add_pd(_mm512_loadu_pd(dw.add(8)), a1));
        _mm512_storeu_pd(dw.add(16), _mm512_add_pd(_mm512_loadu_pd(dw.add(16)), a2));
        _mm512_storeu_pd(dw.add(24), _mm512_add_pd(_mm512_loadu_pd(dw.add(24)), a3));
    }

    /// AVX2 weight-gradient block: 4 consecutive taps per pass.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gwt_taps4_avx2(dy: *const f64, len: usize, x: *const f64, dw: *mut f64) {
        let mut acc = _mm256_setzero_pd();
        for t in 0..len {
            let dyv = _mm256_set1_pd(*dy.add(t));
            acc = _mm256_fmadd_pd(dyv, _mm256_loadu_pd(x.add(t)), acc);
        }
        let sum = _mm256_add_pd(_mm256_loadu_pd(dw), acc);
        _mm256_storeu_pd(dw, sum);
    }

    /// Four-block AVX2 variant: 16 consecutive taps per pass.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gwt_taps16_avx2(dy: *const f64, len: usize, x: *const f64, dw: *mut f64) {
        let mut a0 = _mm256_setzero_pd();
        let mut a1 = _mm256_setzero_pd();
        let mut a2 = _mm256_setzero_pd();
        let mut a3 = _mm256_setzero_pd();
        for t in 0..len {
            let dyv = _mm256_set1_pd(*dy.add(t));
            let xp = x.add(t);
            a0 = _mm256_fmadd_pd(dyv, _mm256_loadu_pd(xp), a0);
            a1 = _mm256_fmadd_pd(dyv, _mm256_loadu_pd(xp.add(4)), a1);
            a2 = _mm256_fmadd_pd(dyv, _mm256_loadu_pd(xp.add(8)), a2);
            a3 = _mm256_fmadd_pd(dyv, _mm256_loadu_pd(xp.add(12)), a3);
        }
        _mm256_storeu_pd(dw, _mm256_add_pd(_mm256_loadu_pd(dw), a0));
        _mm256_storeu_pd(dw.add(4), _mm256_add_pd(_mm256_loadu_pd(dw.add(4)), a1));
        _mm256_storeu_pd(dw.add(8), _mm256_add_pd(_mm256_loadu_pd(dw.add(8)), a2));
        _mm256_storeu_pd(dw.add(12), _mm256_add_pd(_mm256_loadu_pd(dw.add(12)), a3));
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn dot_avx512(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let mut acc0 = _mm512_setzero_pd();
        let mut acc1 = _mm512_setzero_pd();
        let mut acc2 = _mm512_setzero_pd();
        let mut acc3 = _mm512_setzero_pd();
        let mut i = 0;
        while i + 32 <= n {
            acc0 = _mm512_fmadd_pd(_mm512_loadu_pd(ap.add(i)), _mm512_loadu_pd(bp.add(i)), acc0);
            acc1 = _mm512_fmadd_pd(
                _mm512_loadu_pd(ap.add(i + 8)),
                _mm512_loadu_pd(bp.add(i + 8)),
                acc1,
            );
            acc2 = _mm512_fmadd_pd(
                _mm512_loadu_pd(ap.add(i + 16)),
                _mm512_loadu_pd(bp.add(i + 16)),
                acc2,
            );
            acc3 = _mm512_fmadd_pd(
                _mm512_loadu_pd(ap.add(i + 24)),
                _mm512_loadu_pd(bp.add(i + 24)),
                acc3,
            );
            i += 32;
        }
        while i + 8 <= n {
            acc0 = _mm512_fmadd_pd(_mm512_loadu_pd(ap.add(i)), _mm512_loadu_pd(bp.add(i)), acc0);
            i += 8;
        }
        let acc = _mm512_add_pd(_mm512_add_pd(acc0, acc1), _mm512_add_pd(acc2, acc3));
        let mut sum = _mm512_reduce_add_pd(acc);
        while i < n {
            sum += *ap.add(i) * *bp.add(i);
            i += 1;
        }
        sum
    }
}

/// `dst += a * src`, elementwise over equal-length slices.
pub fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    match active_simd() {
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx512 => unsafe { x86::axpy_avx512(dst, a, src) },
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx2 => unsafe { x86::axpy_avx2(dst, a, src) },
        _ => axpy_scalar(dst, a, src),
    }
}

/// Dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match active_simd() {
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx512 => unsafe { x86::dot_avx512(a, b) },
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx2 => unsafe { x86::dot_avx2(a, b) },
        _ => dot_scalar(a, b),
    }
}

/// Valid `t` range for `dst[t] (op) src[t + delta]`.
fn overlap(n_dst: usize, n_src: usize, delta: isize) -> (usize, usize) {
    let t0 = if delta < 0 { (-delta) as usize } else { 0 };
    let t1 = (n_src as isize - delta).clamp(0, n_dst as isize) as usize;
    (t0.min(t1), t1)
}

/// `dst[t] += a * src[t + delta]` over the valid overlap.
pub fn shifted_axpy(dst: &mut [f64], src: &[f64], a: f64, delta: isize) {
    let (t0, t1) = overlap(dst.len(), src.len(), delta);
    if t0 >= t1 {
        return;
    }
    let s0 = (t0 as isize + delta) as usize;
    axpy(&mut dst[t0..t1], a, &src[s0..s0 + (t1 - t0)]);
}

/// `sum_t a[t] * b[t + delta]` over the valid overlap.
pub fn shifted_dot(a: &[f64], b: &[f64], delta: isize) -> f64 {
    let (t0, t1) = overlap(a.len(), b.len(), delta);
    if t0 >= t1 {
        return 0.0;
    }
    let s0 = (t0 as isize + delta) as usize;
    dot(&a[t0..t1], &b[s0..s0 + (t1 - t0)])
}

fn left_pad(k: usize) -> isize {
    ((k - 1) / 2) as isize
}

/// Register tile width of the blocked interior paths, per SIMD level.
fn tile_width() -> usize {
    match active_simd() {
        SimdLevel::Avx512 => 32,
        SimdLevel::Avx2 => 16,
        SimdLevel::Scalar => 0,
    }
}

/// Output positions whose taps are all in bounds: `t + kk - pl` lands in
/// `[0, n)` for every tap `kk` of a width-`k` kernel. Empty when `n < k`.
fn interior(n: usize, k: usize, pl: usize) -> (usize, usize) {
    let hi = n.saturating_sub(k - 1 - pl);
    (pl.min(hi), hi)
}

/// Runs `shifted_axpy` restricted to the edge columns outside `[i0, i1)`.
fn edge_axpy(dst: &mut [f64], src: &[f64], a: f64, delta: isize, i0: usize, i1: usize) {
    let (t0, t1) = overlap(dst.len(), src.len(), delta);
    let head = (t0, t1.min(i0));
    let tail = (t0.max(i1), t1);
    for (lo, hi) in [head, tail] {
        if lo < hi {
            let s0 = (lo as isize + delta) as usize;
            axpy(&mut dst[lo..hi], a, &src[s0..s0 + (hi - lo)]);
        }
    }
}

/// Forward convolution for one batch item:
/// `y[o][t] = bias[o] + sum_{c,k} w[o][c][k] * x[c][t + k - pl]`.
pub fn conv1d_fwd_one(
    x: &[f64],
    c_in: usize,
    n: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    y: &mut [f64],
) {
    let pl = left_pad(k);
    let plu = pl as usize;
    let (i0, i1) = interior(n, k, plu);
    let tile = tile_width();
    for o in 0..c_out {
        let yo = &mut y[o * n..(o + 1) * n];
        yo.fill(bias[o]);
        let w_row = &w[o * c_in * k..(o + 1) * c_in * k];
        if tile == 0 || i1 - i0 < tile {
            for c in 0..c_in {
                let xc = &x[c * n..(c + 1) * n];
                let woc = &w_row[c * k..(c + 1) * k];
                for (kk, &wv) in woc.iter().enumerate() {
                    shifted_axpy(yo, xc, wv, kk as isize - pl);
                }
            }
            continue;
        }
        for c in 0..c_in {
            let xc = &x[c * n..(c + 1) * n];
            let woc = &w_row[c * k..(c + 1) * k];
            for (kk, &wv) in woc.iter().enumerate() {
                edge_axpy(yo, xc, wv, kk as isize - pl, i0, i1);
            }
        }
        let mut t0 = i0;
        #[cfg(target_arch = "x86_64")]
        {
            match active_simd() {
                SimdLevel::Avx512 => {
                    while t0 + 32 <= i1 {
                        unsafe {
                            x86::fwd_tile32_avx512(
                                x.as_ptr(),
                                n,
                                c_in,
                                w_row.as_ptr(),
                                k,
                                plu,
                                yo.as_mut_ptr(),
                                t0,
                            );
                        }
                        t0 += 32;
                    }
                }
                SimdLevel::Avx2 => {
                    while t0 + 16 <= i1 {
                        unsafe {
                            x86::fwd_tile16_avx2(
                                x.as_ptr(),
                                n,
                                c_in,
                                w_row.as_ptr(),
                                k,
                                plu,
                                yo.as_mut_ptr(),
                                t0,
                            );
                        }
                        t0 += 16;
                    }
                }
                SimdLevel::Scalar => {}
            }
        }
        // Interior positions past the last full tile, one point at a time.
        for t in t0..i1 {
            let mut acc = yo[t];
            for c in 0..c_in {
                let xc = &x[c * n + t - plu..];
                let woc = &w_row[c * k..(c + 1) * k];
                for (kk, &wv) in woc.iter().enumerate() {
                    acc += wv * xc[kk];
                }
            }
            yo[t] = acc;
        }
    }
}

/// Input gradient for one batch item:
/// `dx[c][t] = sum_{o,k} w[o][c][k] * dy[o][t - (k - pl)]`.
/// `dx` must be zeroed by the caller.
pub fn conv1d_grad_input_one(
    dy: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    n: usize,
    k: usize,
    dx: &mut [f64],
) {
    let pl = left_pad(k);
    let plu = pl as usize;
    // Valid dy index is t + pl - kk, in bounds for every tap when
    // t >= k-1-pl and t < n - pl.
    let hi = n.saturating_sub(plu);
    let lo = (k - 1 - plu).min(hi);
    let tile = tile_width();
    for c in 0..c_in {
        let dxc = &mut dx[c * n..(c + 1) * n];
        if tile == 0 || hi - lo < tile {
            for o in 0..c_out {
                let dyo = &dy[o * n..(o + 1) * n];
                let woc = &w[(o * c_in + c) * k..][..k];
                for (kk, &wv) in woc.iter().enumerate() {
                    shifted_axpy(dxc, dyo, wv, pl - kk as isize);
                }
            }
            continue;
        }
        for o in 0..c_out {
            let dyo = &dy[o * n..(o + 1) * n];
            let woc = &w[(o * c_in + c) * k..][..k];
            for (kk, &wv) in woc.iter().enumerate() {
                edge_axpy(dxc, dyo, wv, pl - kk as isize, lo, hi);
            }
        }
        let mut t0 = lo;
        #[cfg(target_arch = "x86_64")]
        {
            match active_simd() {
                SimdLevel::Avx512 => {
                    while t0 + 32 <= hi {
                        unsafe {
                            x86::gin_tile32_avx512(
                                dy.as_ptr(),
                                n,
                                c_in,
                                c_out,
                                w.as_ptr(),
                                k,
                                plu,
                                c,
                                dxc.as_mut_ptr(),
                                t0,
                            );
                        }
                        t0 += 32;
                    }
                }
                SimdLevel::Avx2 => {
                    while t0 + 16 <= hi {
                        unsafe {
                            x86::gin_tile16_avx2(
                                dy.as_ptr(),
                                n,
                                c_in,
                                c_out,
                                w.as_ptr(),
                                k,
                                plu,
                                c,
                                dxc.as_mut_ptr(),
                                t0,
                            );
                        }
                        t0 += 16;
                    }
                }
                SimdLevel::Scalar => {}
            }
        }
        for t in t0..hi {
            let mut acc = dxc[t];
            for o in 0..c_out {
                let base = o * n + t + plu;
                let woc = &w[(o * c_in + c) * k..][..k];
                for (kk, &wv) in woc.iter().enumerate() {
                    acc += wv * dy[base - kk];
                }
            }
            dxc[t] = acc;
        }
    }
}

/// Weight and bias gradients for one batch item, accumulated into `dw`/`db`:
/// `dw[o][c][k] += sum_t dy[o][t] * x[c][t + k - pl]`, `db[o] += sum_t dy[o][t]`.
pub fn conv1d_grad_weight_one(
    x: &[f64],
    dy: &[f64],
    c_in: usize,
    c_out: usize,
    n: usize,
    k: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let pl = left_pad(k);
    let plu = pl as usize;
    let (i0, i1) = interior(n, k, plu);
    // Tap blocks need at least one full vector of interior positions to pay
    // off; below that the per-tap dot over the whole row wins.
    let blocked = tile_width() != 0 && i1 - i0 >= 8;
    for o in 0..c_out {
        let dyo = &dy[o * n..(o + 1) * n];
        db[o] += dyo.iter().sum::<f64>();
        for c in 0..c_in {
            let xc = &x[c * n..(c + 1) * n];
            let base = (o * c_in + c) * k;
            if !blocked {
                for kk in 0..k {
                    dw[base + kk] += shifted_dot(dyo, xc, kk as isize - pl);
                }
                continue;
            }
            // Edge positions outside the interior, one short dot per tap.
            for kk in 0..k {
                let d = kk as isize - pl;
                let (t0, t1) = overlap(n, n, d);
                let head_end = t1.min(i0);
                if t0 < head_end {
                    let s = (t0 as isize + d) as usize;
                    dw[base + kk] += dot(&dyo[t0..head_end], &xc[s..s + (head_end - t0)]);
                }
                let tail_start = t0.max(i1);
                if tail_start < t1 {
                    let s = (tail_start as isize + d) as usize;
                    dw[base + kk] += dot(&dyo[tail_start..t1], &xc[s..s + (t1 - tail_start)]);
                }
            }
            // Interior positions: stream dy once, accumulating a register
            // block of consecutive taps. x is offset so tap kk0 reads
            // xc[i0 - pl + kk0] at the first position.
            let len = i1 - i0;
            let x0 = i0 - plu;
            let mut kk0 = 0usize;
            #[cfg(target_arch = "x86_64")]
            unsafe {
                let dyp = dyo.as_ptr().add(i0);
                match active_simd() {
                    SimdLevel::Avx512 => {
                        while kk0 + 32 <= k {
                            x86::gwt_taps32_avx512(
                                dyp,
                                len,
                                xc.as_ptr().add(x0 + kk0),
                                dw.as_mut_ptr().add(base + kk0),
                            );
                            kk0 += 32;
                        }
                        while kk0 + 8 <= k {
                            x86::gwt_taps8_avx512(
                                dyp,
                                len,
                                xc.as_ptr().add(x0 + kk0),
                                dw.as_mut_ptr().add(base + kk0),
                            );
                            kk0 += 8;
                        }
                    }
                    SimdLevel::Avx2 => {
                        while kk0 + 16 <= k {
                            x86::gwt_taps16_avx2(
                                dyp,
                                len,
                                xc.as_ptr().add(x0 + kk0),
                                dw.as_mut_ptr().add(base + kk0),
                            );
                            kk0 += 16;
                        }
                        while kk0 + 4 <= k {
                            x86::gwt_taps4_avx2(
                                dyp,
                                len,
                                xc.as_ptr().add(x0 + kk0),
                                dw.as_mut_ptr().add(base + kk0),
                            );
                            kk0 += 4;
                        }
                    }
                    SimdLevel::Scalar => {}
                }
            }
            for kk in kk0..k {
                dw[base + kk] += dot(&dyo[i0..i1], &xc[x0 + kk..x0 + kk + len]);
            }
        }
    }
}

/// Batched forward pass; `y` has room for `b * c_out * n` values.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd(
    x: &[f64],
    b: usize,
    c_in: usize,
    n: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    y: &mut [f64],
) {
    debug_assert_eq!(x.len(), b * c_in * n);
    debug_assert_eq!(y.len(), b * c_out * n);
    parallel::indexed_fill(y, c_out * n, |i, chunk| {
        conv1d_fwd_one(&x[i * c_in * n..(i + 1) * c_in * n], c_in, n, w, c_out, k, bias, chunk);
    });
}

/// Batched input gradient.
pub fn conv1d_grad_input(
    dy: &[f64],
    w: &[f64],
    b: usize,
    c_in: usize,
    c_out: usize,
    n: usize,
    k: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; b * c_in * n];
    parallel::indexed_fill(&mut dx, c_in * n, |i, chunk| {
        conv1d_grad_input_one(&dy[i * c_out * n..(i + 1) * c_out * n], w, c_in, c_out, n, k, chunk);
    });
    dx
}

/// Batched weight/bias gradient, summed over the batch in index order.
pub fn conv1d_grad_weight(
    x: &[f64],
    dy: &[f64],
    b: usize,
    c_in: usize,
    c_out: usize,
    n: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let partials = parallel::indexed_map(b, |i| {
        let mut dw = vec![0.0; c_out * c_in * k];
        let mut db = vec![0.0; c_out];
        conv1d_grad_weight_one(
            &x[i * c_in * n..(i + 1) * c_in * n],
            &dy[i * c_out * n..(i + 1) * c_out * n],
            c_in,
            c_out,
            n,
            k,
            &mut dw,
            &mut db,
        );
        (dw, db)
    });
    let mut dw = vec![0.0; c_out * c_in * k];
    let mut db = vec![0.0; c_out];
    for (pw, pb) in partials {
        for (a, x) in dw.iter_mut().zip(&pw) {
            *a += x;
        }
        for (a, x) in db.iter_mut().zip(&pb) {
            *a += x;
        }
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::substream;

    fn naive_fwd(
        x: &[f64],
        c_in: usize,
        n: usize,
        w: &[f64],
        c_out: usize,
        k: usize,
        bias: &[f64],
    ) -> Vec<f64> {
        let pl = ((k - 1) / 2) as isize;
        let mut y = vec![0.0; c_out * n];
        for o in 0..c_out {
            for t in 0..n {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for kk in 0..k {
                        let src = t as isize + kk as isize - pl;
                        if src >= 0 && (src as usize) < n {
                            acc += w[(o * c_in + c) * k + kk] * x[c * n + src as usize];
                        }
                    }
                }
                y[o * n + t] = acc;
            }
        }
        y
    }

    fn rand_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn forward_matches_worked_example() {
        // x = [1 2 3], K = 3 all-ones kernel, zero bias: y = [3 6 5].
        let y = {
            let mut y = vec![0.0; 3];
            conv1d_fwd_one(&[1.0, 2.0, 3.0], 1, 3, &[1.0; 3], 1, 3, &[0.0], &mut y);
            y
        };
        assert_eq!(y, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn forward_matches_naive_on_random_shapes() {
        let mut rng = substream(100, 99, 0);
        let shapes = [
            (1, 1, 1, 1),
            (1, 1, 5, 3),
            (2, 3, 7, 4),
            (3, 2, 16, 64),
            (1, 4, 40, 7),
            (4, 1, 9, 1),
            (2, 2, 3, 8),
            // Wide enough for full register tiles plus a scalar remainder.
            (3, 2, 139, 64),
            (2, 3, 97, 5),
            (4, 2, 200, 1),
            (1, 2, 70, 64),
        ];
        for &(c_in, c_out, n, k) in &shapes {
            let x = rand_vec(c_in * n, &mut rng);
            let w = rand_vec(c_out * c_in * k, &mut rng);
            let bias = rand_vec(c_out, &mut rng);
            let want = naive_fwd(&x, c_in, n, &w, c_out, k, &bias);
            let mut got = vec![0.0; c_out * n];
            conv1d_fwd_one(&x, c_in, n, &w, c_out, k, &bias, &mut got);
            assert!(close(&got, &want, 1e-10), "shape {:?}", (c_in, c_out, n, k));
        }
    }

    #[test]
    fn gradients_match_naive_accumulation() {
        // Build the full linear map with the naive forward, then derive both
        // gradients from first principles: dx = sum over outputs of w against
        // dy, dw[o][c][k] = sum_t dy[o][t] x[c][t+k-pl].
        let shapes = [(3, 2, 11, 6), (2, 3, 150, 64), (3, 2, 90, 5), (2, 2, 64, 1)];
        for &(c_in, c_out, n, k) in &shapes {
            let pl = ((k - 1) / 2) as isize;
            let mut rng = substream(200, 99, 0);
            let x = rand_vec(c_in * n, &mut rng);
            let w = rand_vec(c_out * c_in * k, &mut rng);
            let dy = rand_vec(c_out * n, &mut rng);

            let mut want_dx = vec![0.0; c_in * n];
            let mut want_dw = vec![0.0; c_out * c_in * k];
            let mut want_db = vec![0.0; c_out];
            for o in 0..c_out {
                for t in 0..n {
                    want_db[o] += dy[o * n + t];
                    for c in 0..c_in {
                        for kk in 0..k {
                            let src = t as isize + kk as isize - pl;
                            if src >= 0 && (src as usize) < n {
                                let wi = (o * c_in + c) * k + kk;
                                want_dx[c * n + src as usize] += w[wi] * dy[o * n + t];
                                want_dw[wi] += dy[o * n + t] * x[c * n + src as usize];
                            }
                        }
                    }
                }
            }

            let mut dx = vec![0.0; c_in * n];
            conv1d_grad_input_one(&dy, &w, c_in, c_out, n, k, &mut dx);
            assert!(close(&dx, &want_dx, 1e-10), "dx shape {:?}", (c_in, c_out, n, k));

            let mut dw = vec![0.0; c_out * c_in * k];
            let mut db = vec![0.0; c_out];
            conv1d_grad_weight_one(&x, &dy, c_in, c_out, n, k, &mut dw, &mut db);
            assert!(close(&dw, &want_dw, 1e-10), "dw shape {:?}", (c_in, c_out, n, k));
            assert!(close(&db, &want_db, 1e-10), "db shape {:?}", (c_in, c_out, n, k));
        }
    }

    #[test]
    fn batched_forms_agree_with_per_item_calls() {
        let (b, c_in, c_out, n, k) = (3, 2, 4, 33, 64);
        let mut rng = substream(300, 99, 0);
        let x = rand_vec(b * c_in * n, &mut rng);
        let w = rand_vec(c_out * c_in * k, &mut rng);
        let bias = rand_vec(c_out, &mut rng);
        let dy = rand_vec(b * c_out * n, &mut rng);

        let mut y = vec![0.0; b * c_out * n];
        conv1d_fwd(&x, b, c_in, n, &w, c_out, k, &bias, &mut y);
        for i in 0..b {
            let mut yi = vec![0.0; c_out * n];
            conv1d_fwd_one(&x[i * c_in * n..(i + 1) * c_in * n], c_in, n, &w, c_out, k, &bias, &mut yi);
            assert_eq!(&y[i * c_out * n..(i + 1) * c_out * n], &yi[..]);
        }

        let dx = conv1d_grad_input(&dy, &w, b, c_in, c_out, n, k);
        assert_eq!(dx.len(), b * c_in * n);
        let (dw, db) = conv1d_grad_weight(&x, &dy, b, c_in, c_out, n, k);
        let mut want_dw = vec![0.0; c_out * c_in * k];
        let mut want_db = vec![0.0; c_out];
        for i in 0..b {
            conv1d_grad_weight_one(
                &x[i * c_in * n..(i + 1) * c_in * n],
                &dy[i * c_out * n..(i + 1) * c_out * n],
                c_in,
                c_out,
                n,
                k,
                &mut want_dw,
                &mut want_db,
            );
        }
        assert!(close(&dw, &want_dw, 1e-12));
        assert!(close(&db, &want_db, 1e-12));
    }

    #[test]
    fn simd_paths_agree_with_scalar() {
        let mut rng = substream(400, 99, 0);
        for len in [1usize, 7, 8, 15, 16, 31, 32, 33, 100, 1000] {
            let a = rand_vec(len, &mut rng);
            let b = rand_vec(len, &mut rng);
            let scale = rng.gen_range(-2.0..2.0);

            let mut want = a.clone();
            axpy_scalar(&mut want, scale, &b);
            let want_dot = dot_scalar(&a, &b);

            #[cfg(target_arch = "x86_64")]
            {
                if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                    let mut got = a.clone();
                    unsafe { x86::axpy_avx2(&mut got, scale, &b) };
                    assert!(close(&got, &want, 1e-12), "avx2 axpy len {len}");
                    let d = unsafe { x86::dot_avx2(&a, &b) };
                    assert!((d - want_dot).abs() < 1e-10, "avx2 dot len {len}");
                }
                if is_x86_feature_detected!("avx512f") {
                    let mut got = a.clone();
                    unsafe { x86::axpy_avx512(&mut got, scale, &b) };
                    assert!(close(&got, &want, 1e-12), "avx512 axpy len {len}");
                    let d = unsafe { x86::dot_avx512(&a, &b) };
                    assert!((d - want_dot).abs() < 1e-10, "avx512 dot len {len}");
                }
            }

            let mut got = a.clone();
            axpy(&mut got, scale, &b);
            assert!(close(&got, &want, 1e-12));
            assert!((dot(&a, &b) - want_dot).abs() < 1e-10);
        }
    }

    #[test]
    fn shifted_ops_respect_bounds() {
        let src = [1.0, 2.0, 3.0];
        for delta in -5..=5isize {
            let mut dst = [0.0; 3];
            shifted_axpy(&mut dst, &src, 1.0, delta);
            for t in 0..3usize {
                let s = t as isize + delta;
                let want = if (0..3).contains(&s) { src[s as usize] } else { 0.0 };
                assert_eq!(dst[t], want, "delta {delta} t {t}");
            }
            let d = shifted_dot(&[1.0; 3], &src, delta);
            let want: f64 = (0..3)
                .filter_map(|t| {
                    let s = t as isize + delta;
                    (0..3).contains(&s).then(|| src[s as usize])
                })
                .sum();
            assert_eq!(d, want, "delta {delta}");
        }
    }

    #[test]
    fn kernel_throughput_is_usable() {
        // Sized like one item of a mid-network layer on a full-length window.
        let (c_in, c_out, n, k) = (16, 16, 2200, 64);
        let mut rng = substream(500, 99, 0);
        let x = rand_vec(c_in * n, &mut rng);
        let w = rand_vec(c_out * c_in * k, &mut rng);
        let bias = rand_vec(c_out, &mut rng);
        let dy = rand_vec(c_out * n, &mut rng);
        let mut y = vec![0.0; c_out * n];
        let reps = 20;
        let macs = (reps * c_out * c_in * k * n) as f64 / 1e9;

        conv1d_fwd_one(&x, c_in, n, &w, c_out, k, &bias, &mut y);
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv1d_fwd_one(&x, c_in, n, &w, c_out, k, &bias, &mut y);
        }
        let fwd = macs / t0.elapsed().as_secs_f64();

        let mut dx = vec![0.0; c_in * n];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            dx.fill(0.0);
            conv1d_grad_input_one(&dy, &w, c_in, c_out, n, k, &mut dx);
        }
        let gin = macs / t0.elapsed().as_secs_f64();

        let mut dw = vec![0.0; c_out * c_in * k];
        let mut db = vec![0.0; c_out];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv1d_grad_weight_one(&x, &dy, c_in, c_out, n, k, &mut dw, &mut db);
        }
        let gwt = macs / t0.elapsed().as_secs_f64();

        println!(
            "conv kernels ({:?}): fwd {fwd:.2} / grad-input {gin:.2} / grad-weight {gwt:.2} GMAC/s",
            active_simd()
        );
        assert!(fwd > 0.3, "forward kernel too slow: {fwd:.2} GMAC/s");
        assert!(gin > 0.3, "input-gradient kernel too slow: {gin:.2} GMAC/s");
        assert!(gwt > 0.3, "weight-gradient kernel too slow: {gwt:.2} GMAC/s");
    }
}
