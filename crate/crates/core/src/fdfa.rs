//! Frequency-domain fusion attention.
//!
//! The query is built by enhancing the input in the wavelet domain (detail
//! subbands filtered with orientation-matched Gabor kernels, the smooth band
//! with a depthwise-separable convolution), then attention runs across
//! channels rather than positions: per head, the `[C/h, M]` query and key
//! maps form a `[C/h, C/h]` similarity map, so cost scales with the channel
//! count squared instead of the pixel count squared.
//!
//! Parameter counts per instance (C channels, h heads, adaptive wavelength):
//!   attention core            4C^2 + 24C + h
//!   + fused query path        C^2 + 11C + 3
//!   + wavelet-only path       4(C^2 + 11C)
//!   + gabor-only path         3
//!   + plain path              0

use std::f64::consts::PI;

use rand::Rng;

use crate::gabor::{self, Band, GaborDirs};
use crate::graph::{Graph, Var};
use crate::layers::{conv1x1, conv_dw, dwsep, init_conv, init_dwsep};
use crate::params::{Binder, ParamStore};
use crate::spectral::{dwt2, idwt2, Subbands};
use crate::tensor::{shape_err, Result, Tensor};

/// How the attention query is produced (the query-construction ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QPath {
    /// Query from a 1x1 convolution of the input directly.
    Plain,
    /// Wavelet split with a depthwise-separable convolution per subband,
    /// no Gabor filtering.
    Dwt,
    /// Full-resolution Gabor bank, no wavelet split.
    Gabor,
    /// The full fusion: wavelet split, Gabor on detail bands, convolution
    /// on the smooth band.
    Fused,
}

/// Wavelength handling for the Gabor kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    /// One learnable raw wavelength per (band, instance), clamped at
    /// synthesis.
    Adaptive,
    /// A shared constant wavelength; registers no parameters.
    Fixed(f64),
}

/// Orientation assignment for the three detail bands, resolved per instance.
/// Each band carries a list of angles whose filter responses are averaged.
#[derive(Debug, Clone, PartialEq)]
pub enum DirPlan {
    Angles { hl: Vec<f64>, lh: Vec<f64>, hh: Vec<f64> },
    /// Gabor filtering replaced by a learnable 3x3 depthwise convolution.
    ConvOnly,
}

impl DirPlan {
    /// Resolve a strategy into concrete angles. `Random` consumes one draw
    /// per band from `rng`, in HL, LH, HH order.
    pub fn resolve(strategy: GaborDirs, rng: &mut impl Rng) -> Result<DirPlan> {
        let plan = match strategy {
            GaborDirs::Matched => DirPlan::Angles {
                hl: vec![gabor::subband_orientation(Band::Hl)?],
                lh: vec![gabor::subband_orientation(Band::Lh)?],
                hh: vec![gabor::subband_orientation(Band::Hh)?],
            },
            GaborDirs::Misaligned => DirPlan::Angles {
                hl: vec![PI / 2.0],
                lh: vec![0.0],
                hh: vec![PI / 4.0],
            },
            GaborDirs::Unified(theta) => DirPlan::Angles {
                hl: vec![theta],
                lh: vec![theta],
                hh: vec![theta],
            },
            GaborDirs::Random => {
                let mut draw = || rng.gen::<f64>() * PI;
                DirPlan::Angles { hl: vec![draw()], lh: vec![draw()], hh: vec![draw()] }
            }
            GaborDirs::Fused => {
                let all = gabor::fused_angles().to_vec();
                DirPlan::Angles { hl: all.clone(), lh: all.clone(), hh: all }
            }
            GaborDirs::ConvOnly => DirPlan::ConvOnly,
        };
        Ok(plan)
    }

    fn band_angles(&self, band: Band) -> &[f64] {
        match self {
            DirPlan::Angles { hl, lh, hh } => match band {
                Band::Hl => hl,
                Band::Lh => lh,
                Band::Hh => hh,
                Band::Ll => &[],
            },
            DirPlan::ConvOnly => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdfaCfg {
    pub channels: usize,
    pub heads: usize,
    pub q_path: QPath,
    pub dirs: DirPlan,
    pub lambda: LambdaMode,
}

impl FdfaCfg {
    fn check(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(shape_err(
                "fdfa",
                format!("channels {} not divisible by heads {}", self.channels, self.heads),
            ));
        }
        Ok(())
    }
}

const DETAIL_BANDS: [Band; 3] = [Band::Hl, Band::Lh, Band::Hh];

fn band_key(band: Band) -> &'static str {
    match band {
        Band::Ll => "ll",
        Band::Hl => "hl",
        Band::Lh => "lh",
        Band::Hh => "hh",
    }
}

/// Register every parameter of one attention instance under `prefix`.
pub fn init_fdfa(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &FdfaCfg,
) -> Result<()> {
    cfg.check()?;
    let c = cfg.channels;
    match cfg.q_path {
        QPath::Plain => {}
        QPath::Fused => {
            init_detail_params(store, rng, prefix, cfg)?;
            init_dwsep(store, rng, &format!("{prefix}.fdf.ll"), c)?;
        }
        QPath::Dwt => {
            for band in [Band::Ll, Band::Hl, Band::Lh, Band::Hh] {
                init_dwsep(store, rng, &format!("{prefix}.fdf.{}", band_key(band)), c)?;
            }
        }
        QPath::Gabor => init_detail_params(store, rng, prefix, cfg)?,
    }
    init_conv(store, rng, &format!("{prefix}.q"), c, c, 1)?;
    init_conv(store, rng, &format!("{prefix}.k_pw"), c, c, 1)?;
    init_conv(store, rng, &format!("{prefix}.k_dw"), c, 1, 3)?;
    init_conv(store, rng, &format!("{prefix}.v_pw"), c, c, 1)?;
    init_conv(store, rng, &format!("{prefix}.v_dw"), c, 1, 3)?;
    init_conv(store, rng, &format!("{prefix}.out"), c, c, 1)?;
    let xi = (c as f64 / cfg.heads as f64).sqrt();
    store.register(&format!("{prefix}.xi"), Tensor::filled(&[cfg.heads], xi))
}

fn init_detail_params(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &FdfaCfg,
) -> Result<()> {
    match &cfg.dirs {
        DirPlan::Angles { .. } => {
            if let LambdaMode::Adaptive = cfg.lambda {
                for band in DETAIL_BANDS {
                    store.register(
                        &format!("{prefix}.fdf.lambda.{}", band_key(band)),
                        Tensor::filled(&[1], gabor::LAMBDA_INIT),
                    )?;
                }
            }
            Ok(())
        }
        DirPlan::ConvOnly => {
            let c = cfg.channels;
            for band in DETAIL_BANDS {
                init_conv(store, rng, &format!("{prefix}.fdf.{}.dw", band_key(band)), c, 1, 3)?;
            }
            Ok(())
        }
    }
}

/// Synthesized Gabor kernel nodes for one detail band (one per plan angle).
fn band_kernels(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    band: Band,
    cfg: &FdfaCfg,
) -> Result<Vec<Var>> {
    let raw = match cfg.lambda {
        LambdaMode::Adaptive => b.var(g, &format!("{prefix}.fdf.lambda.{}", band_key(band)))?,
        LambdaMode::Fixed(v) => g.constant(Tensor::filled(&[1], v)),
    };
    let lambda = g.clamp(raw, gabor::LAMBDA_MIN, gabor::LAMBDA_MAX)?;
    cfg.dirs
        .band_angles(band)
        .iter()
        .map(|&theta| {
            g.gabor_kernel(lambda, theta, gabor::PSI, gabor::SIGMA, gabor::GAMMA, gabor::KSIZE)
        })
        .collect()
}

/// Depthwise-filter a map with each `[k, k]` kernel node and average the
/// responses.
pub fn apply_kernel_bank(g: &mut Graph, x: Var, kernels: &[Var]) -> Result<Var> {
    let c = g.val(x).dims4("gabor_bank")?.1;
    let mut acc: Option<Var> = None;
    for &kern in kernels {
        let k = g.val(kern).shape()[0];
        let shaped = g.reshape(kern, &[1, k, k])?;
        let tiled = g.tile0(shaped, c)?;
        let resp = g.conv2d(x, tiled, None, 1, (k - 1) / 2, c)?;
        acc = Some(match acc {
            Some(a) => g.add(a, resp)?,
            None => resp,
        });
    }
    let sum = acc.ok_or_else(|| shape_err("gabor_bank", "empty kernel bank".into()))?;
    g.mul_scalar(sum, 1.0 / kernels.len() as f64)
}

/// Kernel nodes for the three detail bands, in HL, LH, HH order.
pub struct DetailKernels {
    pub hl: Vec<Var>,
    pub lh: Vec<Var>,
    pub hh: Vec<Var>,
}

/// The fusion pipeline with externally supplied detail kernels: wavelet
/// split, per-band kernel bank, depthwise-separable convolution on the
/// smooth band, wavelet merge. Lets tests substitute identity kernels.
pub fn fdf_with_kernels(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    kernels: &DetailKernels,
) -> Result<Var> {
    let s = dwt2(g, x)?;
    let hl = apply_kernel_bank(g, s.hl, &kernels.hl)?;
    let lh = apply_kernel_bank(g, s.lh, &kernels.lh)?;
    let hh = apply_kernel_bank(g, s.hh, &kernels.hh)?;
    let ll = dwsep(g, b, &format!("{prefix}.fdf.ll"), s.ll)?;
    idwt2(g, &Subbands { ll, hl, lh, hh })
}

/// The query-construction front end: identity for the plain path, otherwise
/// the configured wavelet/Gabor enhancement.
pub fn fdf(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, cfg: &FdfaCfg) -> Result<Var> {
    match cfg.q_path {
        QPath::Plain => Ok(x),
        QPath::Fused => match &cfg.dirs {
            DirPlan::Angles { .. } => {
                let kernels = DetailKernels {
                    hl: band_kernels(g, b, prefix, Band::Hl, cfg)?,
                    lh: band_kernels(g, b, prefix, Band::Lh, cfg)?,
                    hh: band_kernels(g, b, prefix, Band::Hh, cfg)?,
                };
                fdf_with_kernels(g, b, prefix, x, &kernels)
            }
            DirPlan::ConvOnly => {
                let s = dwt2(g, x)?;
                let hl = conv_dw(g, b, &format!("{prefix}.fdf.hl.dw"), s.hl)?;
                let lh = conv_dw(g, b, &format!("{prefix}.fdf.lh.dw"), s.lh)?;
                let hh = conv_dw(g, b, &format!("{prefix}.fdf.hh.dw"), s.hh)?;
                let ll = dwsep(g, b, &format!("{prefix}.fdf.ll"), s.ll)?;
                idwt2(g, &Subbands { ll, hl, lh, hh })
            }
        },
        QPath::Dwt => {
            let s = dwt2(g, x)?;
            let ll = dwsep(g, b, &format!("{prefix}.fdf.ll"), s.ll)?;
            let hl = dwsep(g, b, &format!("{prefix}.fdf.hl"), s.hl)?;
            let lh = dwsep(g, b, &format!("{prefix}.fdf.lh"), s.lh)?;
            let hh = dwsep(g, b, &format!("{prefix}.fdf.hh"), s.hh)?;
            idwt2(g, &Subbands { ll, hl, lh, hh })
        }
        QPath::Gabor => match &cfg.dirs {
            DirPlan::Angles { .. } => {
                let mut acc: Option<Var> = None;
                for band in DETAIL_BANDS {
                    let kernels = band_kernels(g, b, prefix, band, cfg)?;
                    let resp = apply_kernel_bank(g, x, &kernels)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, resp)?,
                        None => resp,
                    });
                }
                g.mul_scalar(acc.expect("three bank slots"), 1.0 / DETAIL_BANDS.len() as f64)
            }
            DirPlan::ConvOnly => conv_dw(g, b, &format!("{prefix}.fdf.hl.dw"), x),
        },
    }
}

/// Attention branch without the residual; returns the `[B, h, C/h, C/h]`
/// attention map alongside the projected output.
pub fn fdfa_branch_with_attention(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    cfg: &FdfaCfg,
) -> Result<(Var, Var)> {
    cfg.check()?;
    let (bb, c, h, w) = g.val(x).dims4("fdfa")?;
    if c != cfg.channels {
        return Err(shape_err(
            "fdfa",
            format!("input has {c} channels, configured for {}", cfg.channels),
        ));
    }
    let fused = fdf(g, b, prefix, x, cfg)?;
    let q = conv1x1(g, b, &format!("{prefix}.q"), fused)?;
    let k_pw = conv1x1(g, b, &format!("{prefix}.k_pw"), x)?;
    let k = conv_dw(g, b, &format!("{prefix}.k_dw"), k_pw)?;
    let v_pw = conv1x1(g, b, &format!("{prefix}.v_pw"), x)?;
    let v = conv_dw(g, b, &format!("{prefix}.v_dw"), v_pw)?;

    let m = h * w;
    let heads = cfg.heads;
    let ch = c / heads;
    let qh = g.reshape(q, &[bb, heads, ch, m])?;
    let kh = g.reshape(k, &[bb, heads, ch, m])?;
    let vh = g.reshape(v, &[bb, heads, ch, m])?;
    let kt = g.transpose_last2(kh)?;
    let logits = g.matmul(qh, kt)?;
    let xi = b.var(g, &format!("{prefix}.xi"))?;
    let xi_b = g.reshape(xi, &[heads, 1, 1])?;
    let inv_xi = g.recip(xi_b)?;
    let scaled = g.mul(logits, inv_xi)?;
    let attn = g.softmax(scaled, 3)?;
    let mixed = g.matmul(attn, vh)?;
    let merged = g.reshape(mixed, &[bb, c, h, w])?;
    let out = conv1x1(g, b, &format!("{prefix}.out"), merged)?;
    Ok((attn, out))
}

/// Attention branch only (used inside a block, which owns the residual).
pub fn fdfa_branch(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    cfg: &FdfaCfg,
) -> Result<Var> {
    Ok(fdfa_branch_with_attention(g, b, prefix, x, cfg)?.1)
}

/// Full attention sub-module on an already-normalized input, residual
/// included.
pub fn fdfa_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x_norm: Var,
    cfg: &FdfaCfg,
) -> Result<Var> {
    let branch = fdfa_branch(g, b, prefix, x_norm, cfg)?;
    g.add(branch, x_norm)
}

/// Multiply count of the similarity and mixing products: `2 h (C/h)^2 M`.
/// Quadratic in channels, linear in pixels.
pub fn attention_flops(c: usize, m: usize, h: usize) -> u64 {
    let ch = (c / h) as u64;
    2 * h as u64 * ch * ch * m as u64
}
