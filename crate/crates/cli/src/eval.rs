//! Evaluation: runs a checkpoint over freshly generated corrupted sets at
//! each occlusion band and reports full-image and masked-region PSNR/SSIM,
//! as a CSV plus one side-by-side comparison panel per band.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use dabformer_core::graph::Graph;
use dabformer_core::harness::{self, SamplePair};
use dabformer_core::model::{self, Checkpoint};
use dabformer_core::oracle;
use dabformer_core::params::{Binder, ParamStore};
use dabformer_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::train;

#[derive(Debug)]
pub struct BandReport {
    pub coverage_lo: f64,
    pub coverage_hi: f64,
    pub count: usize,
    pub psnr_full: f64,
    pub ssim_full: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub rows: Vec<BandReport>,
    pub csv: PathBuf,
    pub panels: Vec<PathBuf>,
}

/// Mean of the valid-mode local SSIM map, restricted to windows whose
/// center pixel is masked when `mask` is given. An empty selection scores
/// 1.0 (nothing differs in a region that does not exist).
fn ssim_mean(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    const K: usize = 11;
    let (_, c, h, w) = a.dims4("eval").map_err(|e| anyhow!("{e}"))?;
    if h < K || w < K {
        bail!("image {h}x{w} smaller than the {K}px SSIM window");
    }
    let win = oracle::gaussian_window_ref(K, 1.5);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - K) {
            for x0 in 0..=(w - K) {
                if let Some(m) = mask {
                    // Window center in valid mode sits K/2 in from the corner.
                    if m.at4(0, 0, y0 + K / 2, x0 + K / 2) == 0.0 {
                        continue;
                    }
                }
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                for dy in 0..K {
                    for dx in 0..K {
                        let wv = win[dy * K + dx];
                        let av = a.at4(0, ch, y0 + dy, x0 + dx);
                        let bv = b.at4(0, ch, y0 + dy, x0 + dx);
                        mx += wv * av;
                        my += wv * bv;
                        xx += wv * av * av;
                        yy += wv * bv * bv;
                        xy += wv * av * bv;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 1.0 } else { total / count as f64 })
}

/// PSNR over the masked pixels only; empty mask gives the +inf sentinel.
fn masked_psnr(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    let (_, c, h, w) = a.dims4("eval").map_err(|e| anyhow!("{e}"))?;
    let mut sq = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.at4(0, 0, y, x) != 0.0 {
                    let d = a.at4(0, ch, y, x) - b.at4(0, ch, y, x);
                    sq += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 || sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (n as f64 / sq).log10())
}

fn forward_clamped(store: &ParamStore, cfg: &RunConfig, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let x = g.constant(input.clone());
    let y = model::model_forward(&mut g, &mut b, &cfg.model, x).map_err(|e| anyhow!("{e}"))?;
    Ok(g.val(y).map(|v| v.clamp(0.0, 1.0)))
}

/// Three images side by side: input | output | ground truth.
fn panel(input: &Tensor, output: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = input.dims4("panel").map_err(|e| anyhow!("{e}"))?;
    let mut out = Tensor::zeros(&[1, c, h, 3 * w]);
    for (slot, img) in [input, output, gt].iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set4(0, ch, y, slot * w + x, img.at4(0, ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

fn band_pairs(cfg: &RunConfig, lo: f64, hi: f64) -> Result<Vec<SamplePair>> {
    let mut band_cfg = cfg.clone();
    band_cfg.coverage_lo = lo;
    band_cfg.coverage_hi = hi;
    band_cfg.corpus_n = cfg.eval_count;
    // A salt keeps evaluation images disjoint from the training corpus.
    band_cfg.model.seed = cfg.model.seed.wrapping_add(0xEA51);
    train::build_pairs(&band_cfg)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    cfg.check()?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| anyhow!("{e}"))?;
    ck.require_fingerprint(&cfg.model.fingerprint())
        .map_err(|e| anyhow!("checkpoint/config mismatch: {e}"))?;
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg.model).map_err(|e| anyhow!("{e}"))?;
    ck.apply_to(&mut store).map_err(|e| anyhow!("{e}"))?;

    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let csv_path = cfg.out_dir.join("eval.csv");
    let mut csv = fs::File::create(&csv_path)?;
    writeln!(csv, "coverage_lo,coverage_hi,count,psnr_full,ssim_full,psnr_masked,ssim_masked")?;

    let mut rows = Vec::new();
    let mut panels = Vec::new();
    for &(lo, hi) in &cfg.eval_bands {
        let pairs = band_pairs(cfg, lo, hi)?;
        let mut acc = BandReport {
            coverage_lo: lo,
            coverage_hi: hi,
            count: pairs.len(),
            psnr_full: 0.0,
            ssim_full: 0.0,
            psnr_masked: 0.0,
            ssim_masked: 0.0,
        };
        for (i, pair) in pairs.iter().enumerate() {
            let out = forward_clamped(&store, cfg, &pair.corrupted)?;
            acc.psnr_full +=
                dabformer_core::losses::psnr(&out, &pair.clean).map_err(|e| anyhow!("{e}"))?;
            acc.ssim_full += ssim_mean(&out, &pair.clean, None)?;
            acc.psnr_masked += masked_psnr(&out, &pair.clean, &pair.mask)?;
            acc.ssim_masked += ssim_mean(&out, &pair.clean, Some(&pair.mask))?;
            if i == 0 {
                let img = panel(&pair.corrupted, &out, &pair.clean)?;
                let path = cfg
                    .out_dir
                    .join(format!("panel_{:.2}_{:.2}.png", lo, hi));
                harness::write_image(&path, &img).map_err(|e| anyhow!("{e}"))?;
                panels.push(path);
            }
        }
        let n = acc.count as f64;
        acc.psnr_full /= n;
        acc.ssim_full /= n;
        acc.psnr_masked /= n;
        acc.ssim_masked /= n;
        writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            acc.coverage_lo,
            acc.coverage_hi,
            acc.count,
            acc.psnr_full,
            acc.ssim_full,
            acc.psnr_masked,
            acc.ssim_masked
        )?;
        rows.push(acc);
    }
    csv.flush()?;
    Ok(EvalOutcome { rows, csv: csv_path, panels })
}
