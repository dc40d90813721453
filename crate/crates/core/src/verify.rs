//! Self-check matrix: every numerical identity the library relies on,
//! recomputed against an independent reference route and reported as a
//! named pass/fail row. Backs the `verify` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fdagn::{self, FdagnCfg};
use crate::fdfa;
use crate::gabor::{self, GaborDirs};
use crate::graph::Graph;
use crate::losses;
use crate::model::{self, Checkpoint, ModelConfig};
use crate::optim;
use crate::oracle;
use crate::params::{Binder, ParamStore};
use crate::spectral;
use crate::tensor::Tensor;

/// Outcome of one identity check.
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    match run() {
        Ok(detail) => SuiteResult { name, passed: true, detail },
        Err(detail) => SuiteResult { name, passed: false, detail },
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).expect("sized")
}

fn bounded(desc: &str, err: f64, tol: f64) -> Result<String, String> {
    if err.is_finite() && err <= tol {
        Ok(format!("{desc}: {err:.3e} <= {tol:.1e}"))
    } else {
        Err(format!("{desc}: {err:.3e} exceeds {tol:.1e}"))
    }
}

fn haar_roundtrip() -> Result<String, String> {
    let x = rand_tensor(&[1, 2, 8, 8], 10);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let bands = spectral::dwt2(&mut g, xv).map_err(|e| e.to_string())?;
    let back = spectral::idwt2(&mut g, &bands).map_err(|e| e.to_string())?;
    let err = g
        .val(back)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    bounded("max |idwt(dwt(x)) - x|", err, 1e-12)
}

fn haar_energy() -> Result<String, String> {
    let x = rand_tensor(&[1, 1, 16, 16], 11);
    let [ll, hl, lh, hh] = spectral::dwt2_tensor(&x).map_err(|e| e.to_string())?;
    let in_e: f64 = x.data().iter().map(|v| v * v).sum();
    let out_e: f64 = [ll, hl, lh, hh]
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    bounded("relative energy drift", (in_e - out_e).abs() / in_e, 1e-9)
}

fn fft_vs_dft() -> Result<String, String> {
    let mut worst = 0.0f64;
    for (h, w) in [(4usize, 4usize), (5, 7), (8, 8), (8, 6)] {
        let x = rand_tensor(&[1, 1, h, w], 12 + (h * w) as u64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = spectral::rfft2(&mut g, xv).map_err(|e| e.to_string())?;
        let spec_ref = oracle::dft2_ref(x.data(), h, w);
        let wf = spectral::half_width(w);
        let re = g.val(f.re).clone();
        let im = g.val(f.im).clone();
        for y in 0..h {
            for x2 in 0..wf {
                let (er, ei) = spec_ref[y * w + x2];
                worst = worst
                    .max((re.at4(0, 0, y, x2) - er).abs())
                    .max((im.at4(0, 0, y, x2) - ei).abs());
            }
        }
    }
    bounded("max bin error vs brute-force transform", worst, 1e-10)
}

fn conv_vs_loop() -> Result<String, String> {
    let x = rand_tensor(&[2, 4, 7, 6], 13);
    let w = rand_tensor(&[6, 2, 3, 3], 14);
    let b = rand_tensor(&[6], 15);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let y = g.conv2d(xv, wv, Some(bv), 1, 1, 2).map_err(|e| e.to_string())?;
    let expect = oracle::conv2d_ref(
        x.data(),
        (2, 4, 7, 6),
        w.data(),
        (6, 2, 3, 3),
        b.data(),
        1,
        1,
        2,
    );
    let err = g
        .val(y)
        .data()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    bounded("max grouped-conv error vs direct loop", err, 1e-12)
}

fn gabor_pointwise() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let lambda = rng.gen_range(0.5..6.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let vals = gabor::kernel_values(
            lambda,
            theta,
            gabor::PSI,
            gabor::SIGMA,
            gabor::GAMMA,
            gabor::KSIZE,
        );
        let half = (gabor::KSIZE / 2) as isize;
        for (i, v) in vals.iter().enumerate() {
            let y = (i / gabor::KSIZE) as isize - half;
            let x = (i % gabor::KSIZE) as isize - half;
            let expect = oracle::gabor_point(
                x as f64,
                y as f64,
                lambda,
                theta,
                gabor::PSI,
                gabor::SIGMA,
                gabor::GAMMA,
            );
            worst = worst.max((v - expect).abs());
        }
    }
    bounded("max tap error over 20 random kernels", worst, 1e-12)
}

fn gabor_landmarks() -> Result<String, String> {
    let v0 = oracle::gabor_point(0.0, 0.0, 2.0, 0.3, 0.0, gabor::SIGMA, gabor::GAMMA);
    if (v0 - 1.0).abs() > 1e-12 {
        return Err(format!("center tap {v0} != 1"));
    }
    // One wavelength along the carrier at lambda = 2: the cos argument is
    // pi, the envelope exp(-1 / (8 pi^2)).
    let v1 = oracle::gabor_point(1.0, 0.0, 2.0, 0.0, 0.0, gabor::SIGMA, gabor::GAMMA);
    let closed = -(-1.0 / (8.0 * std::f64::consts::PI * std::f64::consts::PI)).exp();
    if (v1 - closed).abs() > 1e-12 {
        return Err(format!("half-period tap {v1} vs closed form {closed}"));
    }
    if (v1 - (-0.987423)).abs() > 1e-5 {
        return Err(format!("half-period tap {v1} vs quoted -0.987423"));
    }
    Ok(format!("center 1, half-period {v1:.6}"))
}

fn softmax_rows() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let s = oracle::softmax_ref(&row);
        worst = worst.max((s.iter().sum::<f64>() - 1.0).abs());
    }
    bounded("max row-sum deviation", worst, 1e-12)
}

fn attention_rows() -> Result<String, String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let cfg = fdfa::FdfaCfg {
        channels: 8,
        heads: 2,
        q_path: fdfa::QPath::Fused,
        dirs: fdfa::DirPlan::resolve(GaborDirs::Matched, &mut rng).map_err(|e| e.to_string())?,
        lambda: fdfa::LambdaMode::Adaptive,
    };
    fdfa::init_fdfa(&mut store, &mut rng, "attn", &cfg).map_err(|e| e.to_string())?;
    let x = rand_tensor(&[1, 8, 8, 8], 19);
    let mut g = Graph::new();
    let mut b = Binder::new(&store, false);
    let xv = g.constant(x);
    let (attn, _) = fdfa::fdfa_branch_with_attention(&mut g, &mut b, "attn", xv, &cfg)
        .map_err(|e| e.to_string())?;
    let a = g.val(attn).clone();
    let (bb, hh, rows, cols) = a.dims4("verify").map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for b0 in 0..bb {
        for h0 in 0..hh {
            for r in 0..rows {
                let sum: f64 = (0..cols).map(|c0| a.at4(b0, h0, r, c0)).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    bounded("max attention row-sum deviation", worst, 1e-12)
}

fn fdagn_identity() -> Result<String, String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = FdagnCfg::new(4);
    fdagn::init_fdagn(&mut store, &mut rng, "ffn", &cfg).map_err(|e| e.to_string())?;
    let x = rand_tensor(&[1, 10, 16, 16], 21);
    let mut g = Graph::new();
    let mut b = Binder::new(&store, false);
    let xv = g.constant(x.clone());
    let y = fdagn::frequency_stage(&mut g, &mut b, "ffn", xv, &cfg).map_err(|e| e.to_string())?;
    let err = g
        .val(y)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    bounded("identity-filter frequency stage drift", err, 1e-10)
}

fn shuffle_inverse() -> Result<String, String> {
    let x = rand_tensor(&[2, 8, 6, 6], 22);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let down = g.pixel_unshuffle(xv, 2).map_err(|e| e.to_string())?;
    let back = g.pixel_shuffle(down, 2).map_err(|e| e.to_string())?;
    if g.val(back).data() == x.data() {
        Ok("unshuffle then shuffle is bitwise identity".into())
    } else {
        Err("pixel shuffle roundtrip altered values".into())
    }
}

fn ssim_psnr_closed_forms() -> Result<String, String> {
    let zero = Tensor::zeros(&[1, 3, 16, 16]);
    let one = Tensor::filled(&[1, 3, 16, 16], 1.0);
    let s = losses::ssim_value(&zero, &one).map_err(|e| e.to_string())?;
    let closed = 1e-4 / (1.0 + 1e-4);
    if (s - closed).abs() > 1e-12 {
        return Err(format!("ssim(0, 1) = {s} vs {closed}"));
    }
    let a = Tensor::zeros(&[1, 1, 4, 4]);
    let b = Tensor::filled(&[1, 1, 4, 4], 0.5);
    let p = losses::psnr(&a, &b).map_err(|e| e.to_string())?;
    if (p - 6.0206).abs() > 1e-4 {
        return Err(format!("psnr at uniform 0.5 offset = {p} vs 6.0206"));
    }
    let self_s = losses::ssim_value(&one, &one).map_err(|e| e.to_string())?;
    if (self_s - 1.0).abs() > 1e-12 {
        return Err(format!("ssim(x, x) = {self_s}"));
    }
    Ok(format!("ssim(0,1) = {s:.6e}, psnr(0, 0.5) = {p:.4} dB"))
}

fn cosine_landmarks() -> Result<String, String> {
    let n = 10001;
    let start = optim::cosine_lr(0, n, 2e-4, 1e-6);
    let mid = optim::cosine_lr(5000, n, 2e-4, 1e-6);
    let end = optim::cosine_lr(n - 1, n, 2e-4, 1e-6);
    if start != 2e-4 {
        return Err(format!("lr(0) = {start}"));
    }
    if (mid - 1.005e-4).abs() > 1e-12 {
        return Err(format!("lr(mid) = {mid} vs 1.005e-4"));
    }
    if (end - 1e-6).abs() > 1e-18 {
        return Err(format!("lr(end) = {end}"));
    }
    Ok(format!("{start:.1e} -> {mid:.4e} -> {end:.1e}"))
}

fn checkpoint_roundtrip(work_dir: &std::path::Path) -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg).map_err(|e| e.to_string())?;
    let ck = Checkpoint::from_store(cfg.fingerprint(), &store);
    let path = work_dir.join("verify-roundtrip.ckpt");
    ck.save(&path).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    loaded.save(&path).map_err(|e| e.to_string())?;
    let second = std::fs::read(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    if first == second {
        Ok(format!("save/load/save identical ({} bytes)", first.len()))
    } else {
        Err("re-serialized checkpoint differs".into())
    }
}

fn image_io(work_dir: &std::path::Path) -> Result<String, String> {
    use crate::harness;
    let img = rand_tensor(&[1, 3, 9, 11], 23);
    let mut worst = 0.0f64;
    for name in ["verify-io.png", "verify-io.ppm"] {
        let path = work_dir.join(name);
        harness::write_image(&path, &img).map_err(|e| e.to_string())?;
        let back = harness::read_image(&path).map_err(|e| e.to_string())?;
        let _ = std::fs::remove_file(&path);
        worst = worst.max(
            img.data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max),
        );
    }
    bounded("max roundtrip error", worst, 0.5 / 255.0 + 1e-12)
}

/// Runs the whole matrix. `work_dir` hosts the temporary files of the
/// checkpoint and image checks.
pub fn run_all(work_dir: &std::path::Path) -> Vec<SuiteResult> {
    vec![
        check("haar-roundtrip", haar_roundtrip),
        check("haar-energy", haar_energy),
        check("fft-vs-dft", fft_vs_dft),
        check("conv-vs-loop", conv_vs_loop),
        check("gabor-pointwise", gabor_pointwise),
        check("gabor-landmarks", gabor_landmarks),
        check("softmax-rows", softmax_rows),
        check("attention-rows", attention_rows),
        check("fdagn-identity", fdagn_identity),
        check("pixel-shuffle-inverse", shuffle_inverse),
        check("ssim-psnr-closed-forms", ssim_psnr_closed_forms),
        check("cosine-landmarks", cosine_landmarks),
        check("checkpoint-roundtrip", || checkpoint_roundtrip(work_dir)),
        check("image-io", || image_io(work_dir)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn the_full_matrix_passes() {
        let dir = tempdir().unwrap();
        let results = run_all(dir.path());
        assert_eq!(results.len(), 14);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
