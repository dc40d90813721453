//! Direct 2-D convolution kernels (cross-correlation, zero padding, groups).
//!
//! Loop order keeps the innermost axis contiguous in both the input row and
//! the output row so stride-1 convolutions autovectorize. The graph layer
//! validates shapes; these kernels assume they are consistent.

pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cpg: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.b, self.cout, self.ho, self.wo]
    }
}

/// Valid output-x range for a kernel column: `ix = ox * stride + kx - pad`
/// must land in `[0, w)`.
#[inline]
fn ox_range(kx: usize, d: &ConvDims) -> (usize, usize) {
    let shift = kx as isize - d.pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize + d.stride - 1) / d.stride
    };
    let top = d.w as isize - shift;
    let hi = if top <= 0 {
        0
    } else {
        (((top - 1) as usize) / d.stride + 1).min(d.wo)
    };
    (lo.min(hi), hi)
}

#[inline]
fn iy_of(oy: usize, ky: usize, d: &ConvDims) -> Option<usize> {
    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
    if iy >= 0 && (iy as usize) < d.h {
        Some(iy as usize)
    } else {
        None
    }
}

pub(crate) fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.cout * d.ho * d.wo];
    let cout_pg = d.cout / d.groups;
    let plane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for b in 0..d.b {
        for co in 0..d.cout {
            let out_base = (b * d.cout + co) * oplane;
            if let Some(bias) = bias {
                out[out_base..out_base + oplane].fill(bias[co]);
            }
            let g = co / cout_pg;
            for ci_l in 0..d.cpg {
                let ci = g * d.cpg + ci_l;
                let x_base = (b * d.cin + ci) * plane;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((co * d.cpg + ci_l) * d.kh + ky) * d.kw + kx];
                        let (ox_lo, ox_hi) = ox_range(kx, d);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let shift = kx as isize - d.pad as isize;
                        for oy in 0..d.ho {
                            let Some(iy) = iy_of(oy, ky, d) else { continue };
                            let xrow = x_base + iy * d.w;
                            let orow = out_base + oy * d.wo;
                            if d.stride == 1 {
                                let ix0 = (ox_lo as isize + shift) as usize;
                                let n = ox_hi - ox_lo;
                                let xs = &x[xrow + ix0..xrow + ix0 + n];
                                let os = &mut out[orow + ox_lo..orow + ox_hi];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * d.stride) as isize + shift;
                                    out[orow + ox] += wv * x[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_x(g: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dx = vec![0.0; d.b * d.cin * d.h * d.w];
    let cout_pg = d.cout / d.groups;
    let plane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for b in 0..d.b {
        for co in 0..d.cout {
            let g_base = (b * d.cout + co) * oplane;
            let grp = co / cout_pg;
            for ci_l in 0..d.cpg {
                let ci = grp * d.cpg + ci_l;
                let dx_base = (b * d.cin + ci) * plane;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((co * d.cpg + ci_l) * d.kh + ky) * d.kw + kx];
                        let (ox_lo, ox_hi) = ox_range(kx, d);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let shift = kx as isize - d.pad as isize;
                        for oy in 0..d.ho {
                            let Some(iy) = iy_of(oy, ky, d) else { continue };
                            let dxrow = dx_base + iy * d.w;
                            let grow = g_base + oy * d.wo;
                            if d.stride == 1 {
                                let ix0 = (ox_lo as isize + shift) as usize;
                                let n = ox_hi - ox_lo;
                                let gs = &g[grow + ox_lo..grow + ox_hi];
                                let ds = &mut dx[dxrow + ix0..dxrow + ix0 + n];
                                for (dv, gv) in ds.iter_mut().zip(gs) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * d.stride) as isize + shift;
                                    dx[dxrow + ix as usize] += wv * g[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn backward_w(g: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dw = vec![0.0; d.cout * d.cpg * d.kh * d.kw];
    let cout_pg = d.cout / d.groups;
    let plane = d.h * d.w;
    let oplane = d.ho * d.wo;
    for co in 0..d.cout {
        let grp = co / cout_pg;
        for ci_l in 0..d.cpg {
            let ci = grp * d.cpg + ci_l;
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = ox_range(kx, d);
                    if ox_lo == ox_hi {
                        continue;
                    }
                    let shift = kx as isize - d.pad as isize;
                    let mut acc = 0.0;
                    for b in 0..d.b {
                        let g_base = (b * d.cout + co) * oplane;
                        let x_base = (b * d.cin + ci) * plane;
                        for oy in 0..d.ho {
                            let Some(iy) = iy_of(oy, ky, d) else { continue };
                            let xrow = x_base + iy * d.w;
                            let grow = g_base + oy * d.wo;
                            if d.stride == 1 {
                                let ix0 = (ox_lo as isize + shift) as usize;
                                let n = ox_hi - ox_lo;
                                let gs = &g[grow + ox_lo..grow + ox_hi];
                                let xs = &x[xrow + ix0..xrow + ix0 + n];
                                for (gv, xv) in gs.iter().zip(xs) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * d.stride) as isize + shift;
                                    acc += g[grow + ox] * x[xrow + ix as usize];
                                }
                            }
                        }
                    }
                    dw[((co * d.cpg + ci_l) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
    dw
}

pub(crate) fn backward_bias(g: &[f64], d: &ConvDims) -> Vec<f64> {
    let oplane = d.ho * d.wo;
    let mut db = vec![0.0; d.cout];
    for b in 0..d.b {
        for co in 0..d.cout {
            let base = (b * d.cout + co) * oplane;
            let mut acc = 0.0;
            for v in &g[base..base + oplane] {
                acc += v;
            }
            db[co] += acc;
        }
    }
    db
}
