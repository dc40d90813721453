//! Flat key-value run configuration.
//!
//! Grammar: one `key = value` pair per line, `#` starts a comment, blank
//! lines ignored. Unknown keys and malformed values are errors that carry
//! the line number. The `DABFORMER_SEED` environment variable overrides the
//! configured seed; explicit command-line flags override both.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use dabformer_core::fdfa::{LambdaMode, QPath};
use dabformer_core::gabor::GaborDirs;
use dabformer_core::harness::{CorpusKind, CorruptionKind};
use dabformer_core::losses::LossWeights;
use dabformer_core::model::{FfnKind, ModelConfig};

/// Everything a run needs: model, loss, optimizer schedule, data recipe,
/// output locations.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub iters: usize,
    pub batch: usize,
    pub crop: usize,
    pub corpus: CorpusKind,
    pub corpus_n: usize,
    pub corruption: CorruptionKind,
    pub coverage_lo: f64,
    pub coverage_hi: f64,
    pub extent_lo: usize,
    pub extent_hi: usize,
    pub rain_angle: f64,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Stop once whole-corpus train PSNR reaches this value, if set.
    pub target_psnr: Option<f64>,
    pub eval_bands: Vec<(f64, f64)>,
    pub eval_count: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: ModelConfig::desk(),
            weights: LossWeights::default(),
            lr_init: 2e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            iters: 20_000,
            batch: 2,
            crop: 64,
            corpus: CorpusKind::Mixed,
            corpus_n: 16,
            corruption: CorruptionKind::NoiseBlocks,
            coverage_lo: 0.2,
            coverage_hi: 0.3,
            extent_lo: 8,
            extent_hi: 16,
            rain_angle: 75.0,
            out_dir: PathBuf::from("runs/desk"),
            checkpoint_every: 1000,
            log_every: 50,
            target_psnr: None,
            eval_bands: vec![(0.2, 0.3), (0.4, 0.5), (0.6, 0.7)],
            eval_count: 6,
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        self.model.check().map_err(|e| anyhow!("{e}"))?;
        if !(self.lr_init >= self.lr_min && self.lr_min > 0.0) {
            bail!("learning rates must satisfy lr_init >= lr_min > 0, got {} and {}", self.lr_init, self.lr_min);
        }
        if self.iters == 0 || self.batch == 0 || self.corpus_n == 0 {
            bail!("iters, batch and corpus_n must be positive");
        }
        if self.crop < 16 {
            bail!("crop {} below the 16px model minimum", self.crop);
        }
        for &(lo, hi) in &self.eval_bands {
            if !(0.0..=0.9).contains(&lo) || !(0.0..=0.9).contains(&hi) || lo > hi {
                bail!("eval band [{lo}, {hi}] outside [0, 0.9]");
            }
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_channels" => self.model.base_channels = parse(key, value)?,
            "blocks" => self.model.blocks = parse_four(key, value)?,
            "heads" => self.model.heads = parse_four(key, value)?,
            "expansion" => self.model.expansion = parse(key, value)?,
            "patch" => self.model.patch = parse(key, value)?,
            "q_path" => self.model.q_path = parse_q_path(value)?,
            "gabor_dirs" => self.model.dirs = parse_dirs(value)?,
            "gabor_lambda" => self.model.lambda = parse_lambda(value)?,
            "ffn" => self.model.ffn = parse_ffn(value)?,
            "seed" => self.model.seed = parse(key, value)?,
            "loss_l1" => self.weights.l1 = parse(key, value)?,
            "loss_perceptual" => self.weights.perceptual = parse(key, value)?,
            "loss_edge" => self.weights.edge = parse(key, value)?,
            "loss_ssim" => self.weights.ssim = parse(key, value)?,
            "lr_init" => self.lr_init = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "corpus" => self.corpus = CorpusKind::parse(value).map_err(|e| anyhow!("{e}"))?,
            "corpus_n" => self.corpus_n = parse(key, value)?,
            "corruption" => {
                self.corruption = match value {
                    "noise_blocks" => CorruptionKind::NoiseBlocks,
                    "rain_streaks" => CorruptionKind::RainStreaks,
                    other => bail!("unknown corruption {other:?} (noise_blocks|rain_streaks)"),
                }
            }
            "coverage_lo" => self.coverage_lo = parse(key, value)?,
            "coverage_hi" => self.coverage_hi = parse(key, value)?,
            "extent_lo" => self.extent_lo = parse(key, value)?,
            "extent_hi" => self.extent_hi = parse(key, value)?,
            "rain_angle" => self.rain_angle = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "target_psnr" => {
                self.target_psnr = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "eval_bands" => self.eval_bands = parse_bands(value)?,
            "eval_count" => self.eval_count = parse(key, value)?,
            other => bail!("unknown key {other:?}"),
        }
        Ok(())
    }

    /// Parses a whole config file body, then applies the `DABFORMER_SEED`
    /// override if present.
    pub fn from_str(body: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value', got {raw:?}", i + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::from_str(&body).with_context(|| path.display().to_string())
    }

    pub fn apply_env(&mut self) {
        if let Ok(s) = std::env::var("DABFORMER_SEED") {
            if let Ok(seed) = s.parse::<u64>() {
                self.model.seed = seed;
            }
        }
    }

    /// Serializes back to the flat grammar (used to record the effective
    /// configuration next to run outputs).
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "base_channels = {}", self.model.base_channels);
        let _ = writeln!(s, "blocks = {}", join4(&self.model.blocks));
        let _ = writeln!(s, "heads = {}", join4(&self.model.heads));
        let _ = writeln!(s, "expansion = {}", self.model.expansion);
        let _ = writeln!(s, "patch = {}", self.model.patch);
        let _ = writeln!(s, "q_path = {}", q_path_name(self.model.q_path));
        let _ = writeln!(s, "gabor_dirs = {}", dirs_name(&self.model.dirs));
        let _ = writeln!(s, "gabor_lambda = {}", lambda_name(&self.model.lambda));
        let _ = writeln!(s, "ffn = {}", ffn_name(self.model.ffn));
        let _ = writeln!(s, "seed = {}", self.model.seed);
        let _ = writeln!(s, "loss_l1 = {}", self.weights.l1);
        let _ = writeln!(s, "loss_perceptual = {}", self.weights.perceptual);
        let _ = writeln!(s, "loss_edge = {}", self.weights.edge);
        let _ = writeln!(s, "loss_ssim = {}", self.weights.ssim);
        let _ = writeln!(s, "lr_init = {}", self.lr_init);
        let _ = writeln!(s, "lr_min = {}", self.lr_min);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "iters = {}", self.iters);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "corpus = {}", corpus_name(self.corpus));
        let _ = writeln!(s, "corpus_n = {}", self.corpus_n);
        let _ = writeln!(
            s,
            "corruption = {}",
            match self.corruption {
                CorruptionKind::NoiseBlocks => "noise_blocks",
                CorruptionKind::RainStreaks => "rain_streaks",
            }
        );
        let _ = writeln!(s, "coverage_lo = {}", self.coverage_lo);
        let _ = writeln!(s, "coverage_hi = {}", self.coverage_hi);
        let _ = writeln!(s, "extent_lo = {}", self.extent_lo);
        let _ = writeln!(s, "extent_hi = {}", self.extent_hi);
        let _ = writeln!(s, "rain_angle = {}", self.rain_angle);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(
            s,
            "target_psnr = {}",
            self.target_psnr.map_or("none".to_string(), |v| v.to_string())
        );
        let bands: Vec<String> = self
            .eval_bands
            .iter()
            .map(|(lo, hi)| format!("{lo}-{hi}"))
            .collect();
        let _ = writeln!(s, "eval_bands = {}", bands.join(","));
        let _ = writeln!(s, "eval_count = {}", self.eval_count);
        s
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("invalid value {value:?} for {key}"))
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| anyhow!("{key} needs exactly four comma-separated values, got {value:?}"))
}

pub fn parse_q_path(value: &str) -> Result<QPath> {
    match value {
        "plain" => Ok(QPath::Plain),
        "dwt" => Ok(QPath::Dwt),
        "gabor" => Ok(QPath::Gabor),
        "fused" => Ok(QPath::Fused),
        other => bail!("unknown q_path {other:?} (plain|dwt|gabor|fused)"),
    }
}

pub fn parse_dirs(value: &str) -> Result<GaborDirs> {
    if let Some(deg) = value.strip_prefix("unified:") {
        let deg: f64 = deg
            .parse()
            .map_err(|_| anyhow!("unified wants an angle in degrees, got {deg:?}"))?;
        return Ok(GaborDirs::Unified(deg.to_radians()));
    }
    match value {
        "matched" => Ok(GaborDirs::Matched),
        "misaligned" => Ok(GaborDirs::Misaligned),
        "random" => Ok(GaborDirs::Random),
        "fused" => Ok(GaborDirs::Fused),
        "conv" => Ok(GaborDirs::ConvOnly),
        other => bail!(
            "unknown gabor_dirs {other:?} (matched|misaligned|unified:<deg>|random|fused|conv)"
        ),
    }
}

pub fn parse_lambda(value: &str) -> Result<LambdaMode> {
    if let Some(v) = value.strip_prefix("fixed:") {
        let v: f64 = v
            .parse()
            .map_err(|_| anyhow!("fixed wants a wavelength, got {v:?}"))?;
        return Ok(LambdaMode::Fixed(v));
    }
    match value {
        "adaptive" => Ok(LambdaMode::Adaptive),
        other => bail!("unknown gabor_lambda {other:?} (adaptive|fixed:<v>)"),
    }
}

pub fn parse_ffn(value: &str) -> Result<FfnKind> {
    match value {
        "ffn" => Ok(FfnKind::Ffn),
        "fdagn" => Ok(FfnKind::Fdagn),
        other => bail!("unknown ffn {other:?} (ffn|fdagn)"),
    }
}

pub fn parse_bands(value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|part| {
            let part = part.trim();
            let (lo, hi) = part
                .split_once('-')
                .ok_or_else(|| anyhow!("band {part:?} wants the form lo-hi"))?;
            let lo: f64 = lo.parse().map_err(|_| anyhow!("bad band bound {lo:?}"))?;
            let hi: f64 = hi.parse().map_err(|_| anyhow!("bad band bound {hi:?}"))?;
            Ok((lo, hi))
        })
        .collect()
}

fn join4(v: &[usize; 4]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn q_path_name(q: QPath) -> &'static str {
    match q {
        QPath::Plain => "plain",
        QPath::Dwt => "dwt",
        QPath::Gabor => "gabor",
        QPath::Fused => "fused",
    }
}

fn dirs_name(d: &GaborDirs) -> String {
    match d {
        GaborDirs::Matched => "matched".into(),
        GaborDirs::Misaligned => "misaligned".into(),
        GaborDirs::Unified(rad) => format!("unified:{}", rad.to_degrees()),
        GaborDirs::Random => "random".into(),
        GaborDirs::Fused => "fused".into(),
        GaborDirs::ConvOnly => "conv".into(),
    }
}

fn lambda_name(l: &LambdaMode) -> String {
    match l {
        LambdaMode::Adaptive => "adaptive".into(),
        LambdaMode::Fixed(v) => format!("fixed:{v}"),
    }
}

fn ffn_name(f: FfnKind) -> &'static str {
    match f {
        FfnKind::Ffn => "ffn",
        FfnKind::Fdagn => "fdagn",
    }
}

fn corpus_name(c: CorpusKind) -> &'static str {
    match c {
        CorpusKind::Gradients => "gradients",
        CorpusKind::Checkerboards => "checkerboards",
        CorpusKind::FilteredNoise => "filtered_noise",
        CorpusKind::Mixed => "mixed",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_back_through_the_grammar() {
        let d = RunConfig::default();
        let round = RunConfig::from_str(&d.to_config_string()).unwrap();
        assert_eq!(round.model, d.model);
        assert_eq!(round.weights, d.weights);
        assert_eq!(round.iters, d.iters);
        assert_eq!(round.eval_bands, d.eval_bands);
        round.check().unwrap();
    }

    #[test]
    fn comments_blanks_and_overrides_apply() {
        let body = "\n# a comment\niters = 12  # trailing comment\n\nbatch = 3\nq_path = dwt\ngabor_dirs = unified:45\ngabor_lambda = fixed:2.5\ntarget_psnr = 31.5\n";
        let cfg = RunConfig::from_str(body).unwrap();
        assert_eq!(cfg.iters, 12);
        assert_eq!(cfg.batch, 3);
        assert_eq!(cfg.model.q_path, QPath::Dwt);
        match cfg.model.dirs {
            GaborDirs::Unified(rad) => assert!((rad - 45f64.to_radians()).abs() <= 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.model.lambda, LambdaMode::Fixed(2.5));
        assert_eq!(cfg.target_psnr, Some(31.5));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_str("iters = 5\nnot a pair\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
        let err = RunConfig::from_str("\n\nbogus_key = 1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 3") && msg.contains("bogus_key"), "{msg}");
        let err = RunConfig::from_str("iters = many\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");
    }

    #[test]
    fn bad_enum_values_are_descriptive() {
        assert!(parse_q_path("wavelet").is_err());
        assert!(parse_dirs("unified:north").is_err());
        assert!(parse_lambda("fixed:big").is_err());
        assert!(parse_ffn("mlp").is_err());
        assert!(parse_bands("0.2:0.3").is_err());
        assert_eq!(parse_bands("0.2-0.3, 0.6-0.7").unwrap(), vec![(0.2, 0.3), (0.6, 0.7)]);
    }

    #[test]
    fn invalid_combinations_fail_check() {
        let mut cfg = RunConfig::default();
        cfg.lr_min = 1e-3;
        assert!(cfg.check().is_err());
        let mut cfg = RunConfig::default();
        cfg.crop = 8;
        assert!(cfg.check().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval_bands = vec![(0.5, 0.95)];
        assert!(cfg.check().is_err());
    }
}
