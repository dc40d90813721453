//! Frequency-domain adaptive gating feedforward.
//!
//! Replaces the plain MLP: channels are expanded, the map is cut into 8x8
//! patches whose spectra pass through a learnable complex filter, and after
//! reassembly a depthwise-separable convolution feeds a two-path GELU gate.
//! The filter starts at exactly 1+0i, so at initialization the frequency
//! stage is an FFT roundtrip.
//!
//! Feature maps whose extents are not multiples of the patch size are
//! zero-padded on the bottom/right edge for the frequency stage and cropped
//! back afterwards, so callers never see a shape change.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::layers::{conv1x1, dwsep, init_conv, init_dwsep};
use crate::params::{Binder, ParamStore};
use crate::spectral::{complex_mul, half_width, irfft2, rfft2, ComplexMap};
use crate::tensor::{Result, Tensor};

pub const EXPANSION: f64 = 2.66;
pub const PATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdagnCfg {
    pub channels: usize,
    pub expansion: f64,
    pub patch: usize,
}

impl FdagnCfg {
    pub fn new(channels: usize) -> FdagnCfg {
        FdagnCfg { channels, expansion: EXPANSION, patch: PATCH }
    }

    /// Expanded width, rounded to the nearest even integer so the gate can
    /// split it exactly in half.
    pub fn hidden(&self) -> usize {
        round_to_even(self.channels as f64 * self.expansion)
    }
}

pub fn round_to_even(x: f64) -> usize {
    ((x / 2.0).round() as usize) * 2
}

/// Register every parameter of one feedforward instance under `prefix`.
pub fn init_fdagn(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &FdagnCfg,
) -> Result<()> {
    let c = cfg.channels;
    let ch = cfg.hidden();
    let p = cfg.patch;
    let wf = half_width(p);
    init_conv(store, rng, &format!("{prefix}.expand"), ch, c, 1)?;
    store.register(&format!("{prefix}.filter.re"), Tensor::filled(&[ch, p, wf], 1.0))?;
    store.register(&format!("{prefix}.filter.im"), Tensor::zeros(&[ch, p, wf]))?;
    init_dwsep(store, rng, &format!("{prefix}.mix"), ch)?;
    init_conv(store, rng, &format!("{prefix}.proj"), c, ch / 2, 1)
}

/// Patchwise spectral filtering of an already-expanded map: pad to the patch
/// grid, FFT each patch, multiply by the learned filter, inverse FFT,
/// reassemble, crop. Shape-preserving.
pub fn frequency_stage(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    cfg: &FdagnCfg,
) -> Result<Var> {
    let (_, _, h, w) = g.val(x).dims4("fdagn")?;
    let p = cfg.patch;
    let hp = h.div_ceil(p) * p;
    let wp = w.div_ceil(p) * p;
    let padded = if hp == h && wp == w { x } else { g.zero_pad2d(x, hp - h, wp - w)? };
    let patches = g.patch_split(padded, p)?;
    let spec = rfft2(g, patches)?;
    let filt = ComplexMap {
        re: b.var(g, &format!("{prefix}.filter.re"))?,
        im: b.var(g, &format!("{prefix}.filter.im"))?,
    };
    let shaped = complex_mul(g, &spec, &filt)?;
    let back = irfft2(g, &shaped, p)?;
    let merged = g.patch_merge(back, hp / p, wp / p)?;
    if hp == h && wp == w {
        Ok(merged)
    } else {
        g.crop2d(merged, h, w)
    }
}

/// Feedforward branch on an already-normalized input (the enclosing block
/// owns the residual). `bypass_frequency` skips the spectral stage entirely;
/// with the filter at its identity initialization the two paths agree.
pub fn fdagn_with_bypass(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x_norm: Var,
    cfg: &FdagnCfg,
    bypass_frequency: bool,
) -> Result<Var> {
    let expanded = conv1x1(g, b, &format!("{prefix}.expand"), x_norm)?;
    let filtered = if bypass_frequency {
        expanded
    } else {
        frequency_stage(g, b, prefix, expanded, cfg)?
    };
    let mixed = dwsep(g, b, &format!("{prefix}.mix"), filtered)?;
    let ch = cfg.hidden();
    let p1 = g.slice_c(mixed, 0, ch / 2)?;
    let p2 = g.slice_c(mixed, ch / 2, ch)?;
    let act = g.gelu(p1)?;
    let gated = g.mul(act, p2)?;
    conv1x1(g, b, &format!("{prefix}.proj"), gated)
}

pub fn fdagn_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x_norm: Var,
    cfg: &FdagnCfg,
) -> Result<Var> {
    fdagn_with_bypass(g, b, prefix, x_norm, cfg, false)
}

/// Scalar count of the complex filter weights: `2 Ch P (P/2+1)`.
pub fn filter_param_count(cfg: &FdagnCfg) -> usize {
    2 * cfg.hidden() * cfg.patch * half_width(cfg.patch)
}
