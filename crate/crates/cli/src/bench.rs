//! Scaling measurement for the attention module: wall-clock time of
//! `fdfa_forward` against channel count at fixed resolution and against
//! token count at fixed channels, with least-squares log-log slopes.
//!
//! The channel sweep uses the plain query path with one head so the timed
//! work is the attention core itself (quadratic in C, linear in M); the
//! frequency-fusion query adds terms linear in C that would flatten the
//! fitted exponent.

use std::time::Instant;

use anyhow::{anyhow, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dabformer_core::fdfa::{self, DirPlan, FdfaCfg, LambdaMode, QPath};
use dabformer_core::gabor::GaborDirs;
use dabformer_core::graph::Graph;
use dabformer_core::params::{Binder, ParamStore};
use dabformer_core::tensor::Tensor;

pub const CHANNEL_POINTS: [usize; 4] = [8, 16, 32, 64];
/// Side lengths giving 256, 1024 and 4096 spatial tokens.
pub const TOKEN_SIDES: [usize; 3] = [16, 32, 64];
pub const CHANNEL_SWEEP_SIDE: usize = 32;
pub const TOKEN_SWEEP_CHANNELS: usize = 32;

pub struct BenchPoint {
    pub axis: &'static str,
    pub value: usize,
    pub seconds: f64,
}

pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub channel_slope: f64,
    pub token_slope: f64,
}

fn time_fdfa(channels: usize, side: usize, repeats: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = FdfaCfg {
        channels,
        heads: 1,
        q_path: QPath::Plain,
        dirs: DirPlan::resolve(GaborDirs::Matched, &mut rng).map_err(|e| anyhow!("{e}"))?,
        lambda: LambdaMode::Adaptive,
    };
    let mut store = ParamStore::new();
    fdfa::init_fdfa(&mut store, &mut rng, "bench", &cfg).map_err(|e| anyhow!("{e}"))?;
    let n = channels * side * side;
    let x = Tensor::from_vec(
        &[1, channels, side, side],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .map_err(|e| anyhow!("{e}"))?;

    let run = || -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let xv = g.constant(x.clone());
        let start = Instant::now();
        let y = fdfa::fdfa_forward(&mut g, &mut b, "bench", xv, &cfg)
            .map_err(|e| anyhow!("{e}"))?;
        let elapsed = start.elapsed().as_secs_f64();
        // Consume the output so the work cannot be elided.
        let _ = g.val(y).data()[0];
        Ok(elapsed)
    };
    run()?; // warmup: first pass touches cold allocations
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        best = best.min(run()?);
    }
    Ok(best)
}

/// Ordinary least-squares slope of ln(time) against ln(x).
fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = ((x as f64).ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

pub fn run_bench(repeats: usize) -> Result<BenchReport> {
    let mut points = Vec::new();
    let mut channel_series = Vec::new();
    for &c in &CHANNEL_POINTS {
        let t = time_fdfa(c, CHANNEL_SWEEP_SIDE, repeats)?;
        channel_series.push((c, t));
        points.push(BenchPoint { axis: "channels", value: c, seconds: t });
    }
    let mut token_series = Vec::new();
    for &side in &TOKEN_SIDES {
        let t = time_fdfa(TOKEN_SWEEP_CHANNELS, side, repeats)?;
        token_series.push((side * side, t));
        points.push(BenchPoint { axis: "tokens", value: side * side, seconds: t });
    }
    Ok(BenchReport {
        points,
        channel_slope: loglog_slope(&channel_series),
        token_slope: loglog_slope(&token_series),
    })
}

/// CSV body: one row per measurement, then one `slope` row per axis.
pub fn to_csv(report: &BenchReport) -> String {
    let mut s = String::from("axis,value,seconds\n");
    for p in &report.points {
        s.push_str(&format!("{},{},{:.9}\n", p.axis, p.value, p.seconds));
    }
    s.push_str(&format!("slope,channels,{:.4}\n", report.channel_slope));
    s.push_str(&format!("slope,tokens,{:.4}\n", report.token_slope));
    s
}
