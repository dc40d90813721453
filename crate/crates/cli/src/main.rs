use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dabformer_cli::config::{self, RunConfig};
use dabformer_cli::{bench, cmd_verify, eval, infer, train};

#[derive(Parser)]
#[command(
    name = "dabformer",
    about = "Frequency-fusion transformer for blind image restoration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (flat key = value lines); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed override (wins over the config file and DABFORMER_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Query construction: plain|dwt|gabor|fused.
    #[arg(long)]
    q_path: Option<String>,
    /// Feedforward kind: ffn|fdagn.
    #[arg(long)]
    ffn: Option<String>,
    /// Gabor wavelength: adaptive|fixed:<v>.
    #[arg(long)]
    gabor_lambda: Option<String>,
    /// Detail-band orientations:
    /// matched|misaligned|unified:<deg>|random|fused|conv.
    #[arg(long)]
    gabor_dirs: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let mut c = RunConfig::default();
                c.apply_env();
                c
            }
        };
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.model.seed = seed;
        }
        if let Some(q) = &self.q_path {
            cfg.model.q_path = config::parse_q_path(q)?;
        }
        if let Some(f) = &self.ffn {
            cfg.model.ffn = config::parse_ffn(f)?;
        }
        if let Some(l) = &self.gabor_lambda {
            cfg.model.lambda = config::parse_lambda(l)?;
        }
        if let Some(d) = &self.gabor_dirs {
            cfg.model.dirs = config::parse_dirs(d)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic corpus described by the config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint (model + optimizer state).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Iteration count override.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluate a checkpoint across occlusion bands.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Coverage bands as lo-hi pairs, e.g. 0.2-0.3,0.6-0.7.
        #[arg(long)]
        bands: Option<String>,
    },
    /// Restore one image file (PNG or PPM).
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the numerical self-check matrix; exits nonzero on any failure.
    Verify,
    /// Measure attention scaling and print the CSV with fitted slopes.
    Bench {
        /// Timing repeats per point (minimum is reported).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train { cfg, resume, iters } => {
            let mut cfg = cfg.resolve()?;
            if let Some(n) = iters {
                cfg.iters = n;
            }
            let out = train::cmd_train(&cfg, resume.as_deref())?;
            println!(
                "trained to iteration {} (train PSNR {:.2} dB{}), checkpoint at {}",
                out.final_iter,
                out.final_psnr,
                if out.stopped_early { ", early stop" } else { "" },
                out.checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { cfg, checkpoint, bands } => {
            let mut cfg = cfg.resolve()?;
            if let Some(b) = bands {
                cfg.eval_bands = config::parse_bands(&b)?;
            }
            let out = eval::cmd_eval(&cfg, &checkpoint)?;
            for r in &out.rows {
                println!(
                    "band {:.2}-{:.2}: PSNR {:.2} dB (masked {:.2}), SSIM {:.4} (masked {:.4})",
                    r.coverage_lo,
                    r.coverage_hi,
                    r.psnr_full,
                    r.psnr_masked,
                    r.ssim_full,
                    r.ssim_masked
                );
            }
            println!("report at {}", out.csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer { cfg, checkpoint, input, output } => {
            let cfg = cfg.resolve()?;
            infer::cmd_infer(&cfg, &checkpoint, &input, &output)?;
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let dir = std::env::temp_dir();
            let ok = cmd_verify(&dir)?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Bench { repeats } => {
            let report = bench::run_bench(repeats.max(1))?;
            print!("{}", bench::to_csv(&report));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
