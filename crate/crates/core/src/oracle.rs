//! Independent reference implementations used to cross-check the fast paths.
//!
//! Everything here is written in the most direct form possible (explicit
//! nested loops, no shared helpers with the production code) so that an
//! implementation bug cannot hide in both routes at once. The `verify`
//! suite and the unit tests both run these against the real operations.

/// Direct-loop 2-D convolution (cross-correlation, zero padding).
///
/// `x` is `[B, Cin, H, W]`, `w` is `[Cout, Cin/groups, Kh, Kw]`, `bias` is
/// `[Cout]` or empty. Returns `[B, Cout, Ho, Wo]` flattened row-major.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    xs: (usize, usize, usize, usize),
    w: &[f64],
    ws: (usize, usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let (b_n, cin, h, wd) = xs;
    let (cout, cpg, kh, kw) = ws;
    assert_eq!(cin / groups, cpg);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cout_pg = cout / groups;
    let mut out = vec![0.0; b_n * cout * ho * wo];
    for b in 0..b_n {
        for co in 0..cout {
            let g = co / cout_pg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = if bias.is_empty() { 0.0 } else { bias[co] };
                    for ci_l in 0..cpg {
                        let ci = g * cpg + ci_l;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    let xi = ((b * cin + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((co * cpg + ci_l) * kh + ky) * kw + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Brute-force O(N^2) forward 2-D DFT of a real `h x w` plane.
///
/// Unnormalized: `X[u,v] = sum_{m,n} x[m,n] exp(-2 pi i (u m / h + v n / w))`.
/// Returns the full spectrum as `(re, im)` pairs, row-major `[h][w]`.
pub fn dft2_ref(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut re = 0.0;
            let mut im = 0.0;
            for m in 0..h {
                for n in 0..w {
                    let ang = -2.0
                        * std::f64::consts::PI
                        * (u as f64 * m as f64 / h as f64 + v as f64 * n as f64 / w as f64);
                    re += x[m * w + n] * ang.cos();
                    im += x[m * w + n] * ang.sin();
                }
            }
            out[u * w + v] = (re, im);
        }
    }
    out
}

/// Brute-force inverse 2-D DFT with 1/(h*w) normalization.
///
/// Input is a full complex spectrum `[h][w]`; returns complex output.
pub fn idft2_ref(spec: &[(f64, f64)], h: usize, w: usize) -> Vec<(f64, f64)> {
    let norm = 1.0 / (h as f64 * w as f64);
    let mut out = vec![(0.0, 0.0); h * w];
    for m in 0..h {
        for n in 0..w {
            let mut re = 0.0;
            let mut im = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let ang = 2.0
                        * std::f64::consts::PI
                        * (u as f64 * m as f64 / h as f64 + v as f64 * n as f64 / w as f64);
                    let (sr, si) = spec[u * w + v];
                    let (c, s) = (ang.cos(), ang.sin());
                    re += sr * c - si * s;
                    im += sr * s + si * c;
                }
            }
            out[m * w + n] = (re * norm, im * norm);
        }
    }
    out
}

/// Circular (periodic) 2-D convolution of plane `x` with kernel `k`, both `h x w`.
pub fn circular_conv2d_ref(x: &[f64], k: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for m in 0..h {
        for n in 0..w {
            let mut acc = 0.0;
            for p in 0..h {
                for q in 0..w {
                    let dy = (m + h - p) % h;
                    let dx = (n + w - q) % w;
                    acc += x[p * w + q] * k[dy * w + dx];
                }
            }
            out[m * w + n] = acc;
        }
    }
    out
}

/// Orthonormal Haar analysis of one 2x2 block `[[a, b], [c, d]]` (a, b = top row).
pub fn haar2x2_ref(a: f64, b: f64, c: f64, d: f64) -> (f64, f64, f64, f64) {
    let ll = (a + b + c + d) / 2.0;
    let hl = (a - b + c - d) / 2.0;
    let lh = (a + b - c - d) / 2.0;
    let hh = (a - b - c + d) / 2.0;
    (ll, hl, lh, hh)
}

/// Orthonormal Haar synthesis, inverse of [`haar2x2_ref`].
pub fn haar2x2_inv_ref(ll: f64, hl: f64, lh: f64, hh: f64) -> (f64, f64, f64, f64) {
    let a = (ll + hl + lh + hh) / 2.0;
    let b = (ll - hl + lh - hh) / 2.0;
    let c = (ll + hl - lh - hh) / 2.0;
    let d = (ll - hl - lh + hh) / 2.0;
    (a, b, c, d)
}

/// Pointwise Gabor evaluation:
/// `G(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)`
/// with `x' = x cos(theta) + y sin(theta)`, `y' = -x sin(theta) + y cos(theta)`.
pub fn gabor_point(x: f64, y: f64, lambda: f64, theta: f64, psi: f64, sigma: f64, gamma: f64) -> f64 {
    let xp = x * theta.cos() + y * theta.sin();
    let yp = -x * theta.sin() + y * theta.cos();
    let env = (-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)).exp();
    env * (2.0 * std::f64::consts::PI * xp / lambda + psi).cos()
}

/// Plain softmax of a slice.
pub fn softmax_ref(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&x| x / s).collect()
}

/// Mean absolute difference of two equal-length slices.
pub fn l1_ref(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    s / a.len() as f64
}

/// PSNR in dB against data range 1. Returns +inf on identical inputs.
pub fn psnr_ref(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Per-channel Sobel gradient magnitude of a `[C, H, W]` plane stack,
/// zero-padded borders, `sqrt(gx^2 + gy^2 + eps)`.
pub fn sobel_mag_ref(x: &[f64], c_n: usize, h: usize, w: usize, eps: f64) -> Vec<f64> {
    const GX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const GY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut out = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for y in 0..h {
            for xx in 0..w {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let v = x[(c * h + iy as usize) * w + ix as usize];
                            gx += v * GX[ky][kx];
                            gy += v * GY[ky][kx];
                        }
                    }
                }
                out[(c * h + y) * w + xx] = (gx * gx + gy * gy + eps).sqrt();
            }
        }
    }
    out
}

/// Gaussian window of side `k` with standard deviation `sigma`, normalized to sum 1.
pub fn gaussian_window_ref(k: usize, sigma: f64) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut w = Vec::with_capacity(k * k);
    for y in -half..=half {
        for x in -half..=half {
            w.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Scalar SSIM reference: 11x11 Gaussian window (sigma 1.5), valid-mode
/// windowed statistics, data range 1, averaged over window positions and
/// channels. Inputs are `[C, H, W]` plane stacks.
pub fn ssim_ref(a: &[f64], b: &[f64], c_n: usize, h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    assert!(h >= K && w >= K, "image smaller than SSIM window");
    let win = gaussian_window_ref(K, 1.5);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..c_n {
        for y0 in 0..=(h - K) {
            for x0 in 0..=(w - K) {
                let mut mx = 0.0;
                let mut my = 0.0;
                for ky in 0..K {
                    for kx in 0..K {
                        let wv = win[ky * K + kx];
                        mx += wv * a[(c * h + y0 + ky) * w + x0 + kx];
                        my += wv * b[(c * h + y0 + ky) * w + x0 + kx];
                    }
                }
                let mut vx = 0.0;
                let mut vy = 0.0;
                let mut cov = 0.0;
                for ky in 0..K {
                    for kx in 0..K {
                        let wv = win[ky * K + kx];
                        let da = a[(c * h + y0 + ky) * w + x0 + kx] - mx;
                        let db = b[(c * h + y0 + ky) * w + x0 + kx] - my;
                        vx += wv * da * da;
                        vy += wv * db * db;
                        cov += wv * da * db;
                    }
                }
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Minimal standalone PPM P6 parser following the published grammar:
/// magic, whitespace/comment-separated width, height, maxval, one whitespace
/// byte, then raw RGB triples. Returns (width, height, maxval, pixel bytes).
pub fn ppm_parse_ref(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<u8>), String> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err("missing P6 magic".into());
    }
    pos += 2;
    let next_token = |pos: &mut usize| -> std::result::Result<usize, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format!("expected integer at byte {start}"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .map_err(|e| e.to_string())?
            .parse::<usize>()
            .map_err(|e| e.to_string())
    };
    let w = next_token(&mut pos)?;
    let h = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("expected single whitespace after maxval".into());
    }
    pos += 1;
    let want = w * h * 3 * if maxval < 256 { 1 } else { 2 };
    if bytes.len() - pos != want {
        return Err(format!(
            "payload length {} does not match {}x{} maxval {}",
            bytes.len() - pos,
            w,
            h,
            maxval
        ));
    }
    Ok((w, h, maxval, bytes[pos..].to_vec()))
}
