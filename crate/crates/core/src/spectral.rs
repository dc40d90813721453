//! Frequency-domain primitives: orthonormal Haar wavelets and real 2-D FFTs.
//!
//! The Haar transform works on 2x2 blocks `[[a, b], [c, d]]` (a, b = top row):
//!
//! ```text
//! ll = (a+b+c+d)/2   hl = (a-b+c-d)/2   lh = (a+b-c-d)/2   hh = (a-b-c+d)/2
//! ```
//!
//! The basis is orthonormal, so synthesis is the transpose of analysis,
//! reconstruction is exact and energy is preserved. HL carries horizontal
//! variation (differences along a row), LH vertical, HH diagonal.
//!
//! The real FFT keeps the Hermitian half spectrum: a `[B, C, H, W]` input maps
//! to `[B, C, H, W/2+1]` complex bins (full H extent, last axis halved). The
//! forward transform is unnormalized; the inverse carries the 1/(H*W) factor
//! and produces a real signal by construction. The 1-D complex kernels come
//! from `rustfft`; the brute-force DFT oracle in [`crate::oracle`] stays
//! independent of this path.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::graph::{Graph, Var};
use crate::tensor::{shape_err, Result, Tensor};

// ---------------------------------------------------------------------------
// Haar plane kernels
// ---------------------------------------------------------------------------

/// Analysis of one `h x w` plane (h, w even) into four `h/2 x w/2` planes.
pub(crate) fn haar_plane(
    x: &[f64],
    h: usize,
    w: usize,
    ll: &mut [f64],
    hl: &mut [f64],
    lh: &mut [f64],
    hh: &mut [f64],
) {
    let (h2, w2) = (h / 2, w / 2);
    for gy in 0..h2 {
        for gx in 0..w2 {
            let a = x[(2 * gy) * w + 2 * gx];
            let b = x[(2 * gy) * w + 2 * gx + 1];
            let c = x[(2 * gy + 1) * w + 2 * gx];
            let d = x[(2 * gy + 1) * w + 2 * gx + 1];
            ll[gy * w2 + gx] = (a + b + c + d) / 2.0;
            hl[gy * w2 + gx] = (a - b + c - d) / 2.0;
            lh[gy * w2 + gx] = (a + b - c - d) / 2.0;
            hh[gy * w2 + gx] = (a - b - c + d) / 2.0;
        }
    }
}

/// Synthesis, exact inverse (and adjoint) of [`haar_plane`].
pub(crate) fn haar_plane_inv(
    ll: &[f64],
    hl: &[f64],
    lh: &[f64],
    hh: &[f64],
    h: usize,
    w: usize,
    x: &mut [f64],
) {
    let (h2, w2) = (h / 2, w / 2);
    for gy in 0..h2 {
        for gx in 0..w2 {
            let i = gy * w2 + gx;
            let (l, p, q, r) = (ll[i], hl[i], lh[i], hh[i]);
            x[(2 * gy) * w + 2 * gx] = (l + p + q + r) / 2.0;
            x[(2 * gy) * w + 2 * gx + 1] = (l - p + q - r) / 2.0;
            x[(2 * gy + 1) * w + 2 * gx] = (l + p - q - r) / 2.0;
            x[(2 * gy + 1) * w + 2 * gx + 1] = (l - p - q + r) / 2.0;
        }
    }
}

// ---------------------------------------------------------------------------
// FFT plane kernels
// ---------------------------------------------------------------------------

thread_local! {
    static FFT_CACHE: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn with_fft<R>(n: usize, forward: bool, f: impl FnOnce(&Arc<dyn Fft<f64>>) -> R) -> R {
    FFT_CACHE.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        let fft = cache.entry((n, forward)).or_insert_with(|| {
            planner.plan_fft(
                n,
                if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                },
            )
        });
        f(fft)
    })
}

pub(crate) fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Forward real FFT of one `h x w` plane into `h x (w/2+1)` re/im planes.
pub(crate) fn rfft2_plane(x: &[f64], h: usize, w: usize, re: &mut [f64], im: &mut [f64]) {
    let wf = half_width(w);
    let mut cols = vec![Complex64::new(0.0, 0.0); h * wf];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for n in 0..w {
            row[n] = Complex64::new(x[y * w + n], 0.0);
        }
        with_fft(w, true, |fft| fft.process(&mut row));
        for v in 0..wf {
            cols[y * wf + v] = row[v];
        }
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..wf {
        for y in 0..h {
            col[y] = cols[y * wf + v];
        }
        with_fft(h, true, |fft| fft.process(&mut col));
        for u in 0..h {
            re[u * wf + v] = col[u].re;
            im[u * wf + v] = col[u].im;
        }
    }
}

/// Adjoint of [`rfft2_plane`] as a real-linear map: cotangents on the stored
/// re/im bins back to the real input. Equal to zero-extending the half
/// spectrum, applying the unnormalized inverse transform on both axes and
/// taking the real part.
pub(crate) fn rfft2_adjoint_plane(gre: &[f64], gim: &[f64], h: usize, w: usize, dx: &mut [f64]) {
    let wf = half_width(w);
    let mut cols = vec![Complex64::new(0.0, 0.0); h * wf];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..wf {
        for u in 0..h {
            col[u] = Complex64::new(gre[u * wf + v], gim[u * wf + v]);
        }
        with_fft(h, false, |fft| fft.process(&mut col));
        for y in 0..h {
            cols[y * wf + v] = col[y];
        }
    }
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        row.fill(Complex64::new(0.0, 0.0));
        for v in 0..wf {
            row[v] = cols[y * wf + v];
        }
        with_fft(w, false, |fft| fft.process(&mut row));
        for n in 0..w {
            dx[y * w + n] = row[n].re;
        }
    }
}

/// Inverse real FFT: Hermitian-extend the half spectrum along the last axis,
/// apply the normalized inverse transform, return the real output plane.
pub(crate) fn irfft2_plane(re: &[f64], im: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let wf = half_width(w);
    let mut full = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..wf {
            full[u * w + v] = Complex64::new(re[u * wf + v], im[u * wf + v]);
        }
        // Mirror bins: X[u, v] = conj(X[(h-u) % h, w-v]) for v past the fold,
        // read from the stored half spectrum.
        for v in wf..w {
            let su = (h - u) % h;
            let sv = w - v;
            full[u * w + v] = Complex64::new(re[su * wf + sv], -im[su * wf + sv]);
        }
    }
    let norm = 1.0 / (h as f64 * w as f64);
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    let mut mid = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        row.copy_from_slice(&full[u * w..(u + 1) * w]);
        with_fft(w, false, |fft| fft.process(&mut row));
        mid[u * w..(u + 1) * w].copy_from_slice(&row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for n in 0..w {
        for u in 0..h {
            col[u] = mid[u * w + n];
        }
        with_fft(h, false, |fft| fft.process(&mut col));
        for m in 0..h {
            out[m * w + n] = col[m].re * norm;
        }
    }
}

/// Adjoint of [`irfft2_plane`]: forward-transform the output cotangent and
/// weight the stored bins (doubled where the Hermitian mirror folds).
pub(crate) fn irfft2_adjoint_plane(
    gout: &[f64],
    h: usize,
    w: usize,
    gre: &mut [f64],
    gim: &mut [f64],
) {
    let wf = half_width(w);
    let mut spec_re = vec![0.0; h * wf];
    let mut spec_im = vec![0.0; h * wf];
    rfft2_plane(gout, h, w, &mut spec_re, &mut spec_im);
    let norm = 1.0 / (h as f64 * w as f64);
    for u in 0..h {
        for v in 0..wf {
            let folded = v != 0 && !(w % 2 == 0 && v == w / 2);
            let weight = if folded { 2.0 } else { 1.0 } * norm;
            gre[u * wf + v] = weight * spec_re[u * wf + v];
            gim[u * wf + v] = weight * spec_im[u * wf + v];
        }
    }
}

// ---------------------------------------------------------------------------
// Graph-level API
// ---------------------------------------------------------------------------

/// The four Haar subbands of a feature map, each `[B, C, H/2, W/2]`.
#[derive(Clone, Copy)]
pub struct Subbands {
    pub ll: Var,
    pub hl: Var,
    pub lh: Var,
    pub hh: Var,
}

/// A complex feature map stored as separate real and imaginary tensors of
/// identical shape.
#[derive(Clone, Copy)]
pub struct ComplexMap {
    pub re: Var,
    pub im: Var,
}

/// Single-level orthonormal Haar analysis of `[B, C, H, W]` (H, W even).
pub fn dwt2(g: &mut Graph, x: Var) -> Result<Subbands> {
    let c = g.val(x).shape()[1];
    let stacked = g.dwt2_stacked(x)?;
    Ok(Subbands {
        ll: g.slice_c(stacked, 0, c)?,
        hl: g.slice_c(stacked, c, 2 * c)?,
        lh: g.slice_c(stacked, 2 * c, 3 * c)?,
        hh: g.slice_c(stacked, 3 * c, 4 * c)?,
    })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(g: &mut Graph, s: &Subbands) -> Result<Var> {
    let stacked = g.concat_c(&[s.ll, s.hl, s.lh, s.hh])?;
    g.idwt2_stacked(stacked)
}

/// Real 2-D FFT of `[B, C, H, W]` into a `[B, C, H, W/2+1]` complex map.
pub fn rfft2(g: &mut Graph, x: Var) -> Result<ComplexMap> {
    let c = g.val(x).shape()[1];
    let stacked = g.rfft2_stacked(x)?;
    Ok(ComplexMap {
        re: g.slice_c(stacked, 0, c)?,
        im: g.slice_c(stacked, c, 2 * c)?,
    })
}

/// Inverse real 2-D FFT back to `[B, C, H, w_out]`.
pub fn irfft2(g: &mut Graph, m: &ComplexMap, w_out: usize) -> Result<Var> {
    let stacked = g.concat_c(&[m.re, m.im])?;
    g.irfft2_stacked(stacked, w_out)
}

/// Pointwise complex product `a * w`; `w` may omit the batch axis, in which
/// case it broadcasts across it (the learnable-filter case).
pub fn complex_mul(g: &mut Graph, a: &ComplexMap, w: &ComplexMap) -> Result<ComplexMap> {
    let rr = g.mul(a.re, w.re)?;
    let ii = g.mul(a.im, w.im)?;
    let ri = g.mul(a.re, w.im)?;
    let ir = g.mul(a.im, w.re)?;
    Ok(ComplexMap {
        re: g.sub(rr, ii)?,
        im: g.add(ri, ir)?,
    })
}

/// Plain-tensor Haar analysis used by data-side checks; same kernel as the
/// graph op.
pub fn dwt2_tensor(x: &Tensor) -> Result<[Tensor; 4]> {
    let (b, c, h, w) = x.dims4("dwt2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("dwt2", format!("extents must be even, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut bands = [
        Tensor::zeros(&[b, c, h2, w2]),
        Tensor::zeros(&[b, c, h2, w2]),
        Tensor::zeros(&[b, c, h2, w2]),
        Tensor::zeros(&[b, c, h2, w2]),
    ];
    let plane = h * w;
    let bplane = h2 * w2;
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let boff = (bi * c + ci) * bplane;
            let (first, rest) = bands.split_at_mut(1);
            let (second, rest2) = rest.split_at_mut(1);
            let (third, fourth) = rest2.split_at_mut(1);
            haar_plane(
                &x.data()[off..off + plane],
                h,
                w,
                &mut first[0].data_mut()[boff..boff + bplane],
                &mut second[0].data_mut()[boff..boff + bplane],
                &mut third[0].data_mut()[boff..boff + bplane],
                &mut fourth[0].data_mut()[boff..boff + bplane],
            );
        }
    }
    Ok(bands)
}
