//! Training objective and evaluation metrics.
//!
//! The composite loss is a weighted sum of pixel L1, a multi-stage feature
//! (perceptual) term, a Sobel edge term, and an SSIM term. The feature
//! extractor is pluggable; the shipped default is a frozen fixed-seed conv
//! pyramid rather than pretrained VGG16 weights, which keeps the term's
//! structure and gradient pathways while staying self-contained. This is the
//! one deliberate fidelity deviation in the library and is called out in the
//! README.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::tensor::{invalid, Result, Tensor};

/// Term weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub edge: f64,
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { l1: 10.0, perceptual: 0.6, edge: 0.4, ssim: 0.5 }
    }
}

/// A frozen feature pyramid: maps an image to a list of feature maps whose
/// parameters receive no gradient.
pub trait FeatureExtractor {
    fn stages(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;
}

/// Single-stage extractor returning the input itself; degenerates the
/// perceptual term to plain L1.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn stages(&self, _g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Default perceptual extractor: three stride-2 3x3 convolutions
/// (3 -> 16 -> 32 -> 64 channels) with GELU, weights drawn once from a
/// seeded He-scaled normal and bound as constants thereafter.
pub struct ConvPyramid {
    stages: Vec<(Tensor, Tensor)>,
}

impl ConvPyramid {
    pub fn new(seed: u64) -> ConvPyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(16usize, 3usize), (32, 16), (64, 32)];
        let stages = dims
            .iter()
            .map(|&(cout, cin)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let n = cout * cin * 9;
                let data: Vec<f64> = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                let w = Tensor::from_vec(&[cout, cin, 3, 3], data).expect("sized above");
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        ConvPyramid { stages }
    }

    /// The frozen stage parameters, for reference recomputation in tests.
    pub fn stage_params(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.stages.iter().map(|(w, b)| (w, b))
    }
}

impl FeatureExtractor for ConvPyramid {
    fn stages(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut cur = x;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let conv = g.conv2d(cur, wv, Some(bv), 2, 1, 1)?;
            cur = g.gelu(conv)?;
            outs.push(cur);
        }
        Ok(outs)
    }
}

/// Mean absolute error.
pub fn l1_loss(g: &mut Graph, o: Var, gt: Var) -> Result<Var> {
    let d = g.sub(o, gt)?;
    let a = g.abs(d)?;
    g.mean_all(a)
}

/// Sum over extractor stages of the mean absolute feature difference.
pub fn perceptual_loss(
    g: &mut Graph,
    o: Var,
    gt: Var,
    extractor: &dyn FeatureExtractor,
) -> Result<Var> {
    let fo = extractor.stages(g, o)?;
    let fg = extractor.stages(g, gt)?;
    if fo.len() != fg.len() {
        return Err(invalid("perceptual", "stage count mismatch".into()));
    }
    let mut acc: Option<Var> = None;
    for (a, b) in fo.into_iter().zip(fg) {
        let term = l1_loss(g, a, b)?;
        acc = Some(match acc {
            Some(s) => g.add(s, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| invalid("perceptual", "extractor produced no stages".into()))
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
pub const SOBEL_EPS: f64 = 1e-8;

fn depthwise_const(g: &mut Graph, x: Var, taps: &[f64; 9]) -> Result<Var> {
    let c = g.val(x).dims4("sobel")?.1;
    let k = g.constant(Tensor::from_vec(&[1, 3, 3], taps.to_vec())?);
    let tiled = g.tile0(k, c)?;
    g.conv2d(x, tiled, None, 1, 1, c)
}

/// Per-channel Sobel gradient magnitude `sqrt(gx^2 + gy^2 + eps)` with
/// zero-padded borders.
pub fn sobel_magnitude(g: &mut Graph, x: Var) -> Result<Var> {
    let gx = depthwise_const(g, x, &SOBEL_X)?;
    let gy = depthwise_const(g, x, &SOBEL_Y)?;
    let gx2 = g.mul(gx, gx)?;
    let gy2 = g.mul(gy, gy)?;
    let s = g.add(gx2, gy2)?;
    let se = g.add_scalar(s, SOBEL_EPS)?;
    g.sqrt(se)
}

/// Mean absolute difference of the two Sobel magnitude maps.
pub fn edge_loss(g: &mut Graph, o: Var, gt: Var) -> Result<Var> {
    let mo = sobel_magnitude(g, o)?;
    let mg = sobel_magnitude(g, gt)?;
    l1_loss(g, mo, mg)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
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

/// Mean local SSIM over valid window positions and channels, data range 1.
pub fn ssim(g: &mut Graph, o: Var, gt: Var) -> Result<Var> {
    let (_, c, h, w) = g.val(o).dims4("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}px window"),
        ));
    }
    let win = g.constant(Tensor::from_vec(
        &[1, SSIM_WINDOW, SSIM_WINDOW],
        gaussian_window(SSIM_WINDOW, SSIM_SIGMA),
    )?);
    let win = g.tile0(win, c)?;
    let smooth = |g: &mut Graph, v: Var| g.conv2d(v, win, None, 1, 0, c);

    let mu_o = smooth(g, o)?;
    let mu_g = smooth(g, gt)?;
    let oo = g.mul(o, o)?;
    let gg = g.mul(gt, gt)?;
    let og = g.mul(o, gt)?;
    let e_oo = smooth(g, oo)?;
    let e_gg = smooth(g, gg)?;
    let e_og = smooth(g, og)?;
    let mu_oo = g.mul(mu_o, mu_o)?;
    let mu_gg = g.mul(mu_g, mu_g)?;
    let mu_og = g.mul(mu_o, mu_g)?;
    let var_o = g.sub(e_oo, mu_oo)?;
    let var_g = g.sub(e_gg, mu_gg)?;
    let cov = g.sub(e_og, mu_og)?;

    let a1 = g.mul_scalar(mu_og, 2.0)?;
    let a1 = g.add_scalar(a1, SSIM_C1)?;
    let a2 = g.mul_scalar(cov, 2.0)?;
    let a2 = g.add_scalar(a2, SSIM_C2)?;
    let b1 = g.add(mu_oo, mu_gg)?;
    let b1 = g.add_scalar(b1, SSIM_C1)?;
    let b2 = g.add(var_o, var_g)?;
    let b2 = g.add_scalar(b2, SSIM_C2)?;

    let num = g.mul(a1, a2)?;
    let den = g.mul(b1, b2)?;
    let inv = g.recip(den)?;
    let map = g.mul(num, inv)?;
    g.mean_all(map)
}

/// `1 - ssim`.
pub fn ssim_loss(g: &mut Graph, o: Var, gt: Var) -> Result<Var> {
    let s = ssim(g, o, gt)?;
    let neg = g.mul_scalar(s, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// The composite loss and its four components.
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Var,
    pub edge: Var,
    pub ssim: Var,
}

pub fn total_loss_terms(
    g: &mut Graph,
    o: Var,
    gt: Var,
    w: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<LossTerms> {
    let l1 = l1_loss(g, o, gt)?;
    let perceptual = perceptual_loss(g, o, gt, extractor)?;
    let edge = edge_loss(g, o, gt)?;
    let ssim = ssim_loss(g, o, gt)?;
    let t1 = g.mul_scalar(l1, w.l1)?;
    let t2 = g.mul_scalar(perceptual, w.perceptual)?;
    let t3 = g.mul_scalar(edge, w.edge)?;
    let t4 = g.mul_scalar(ssim, w.ssim)?;
    let s12 = g.add(t1, t2)?;
    let s34 = g.add(t3, t4)?;
    let total = g.add(s12, s34)?;
    Ok(LossTerms { total, l1, perceptual, edge, ssim })
}

pub fn total_loss(
    g: &mut Graph,
    o: Var,
    gt: Var,
    w: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<Var> {
    Ok(total_loss_terms(g, o, gt, w, extractor)?.total)
}

/// `10 log10(1 / MSE)` in decibels for unit-range images; equal inputs give
/// the +infinity sentinel.
pub fn psnr(o: &Tensor, gt: &Tensor) -> Result<f64> {
    if o.shape() != gt.shape() {
        return Err(invalid(
            "psnr",
            format!("shape {:?} vs {:?}", o.shape(), gt.shape()),
        ));
    }
    let mse: f64 = o
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / o.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Scalar SSIM of two plain tensors (metric reporting path).
pub fn ssim_value(o: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let ov = g.constant(o.clone());
    let gv = g.constant(gt.clone());
    let s = ssim(&mut g, ov, gv)?;
    Ok(g.val(s).item())
}
