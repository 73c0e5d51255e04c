//! `deqsc`: dictionary learning, training, denoising and evaluation of
//! sparse-coding hyperspectral denoisers.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{SynthArgs, TrainArgs};
use config::Tuning;

#[derive(Parser)]
#[command(name = "deqsc", version, about)]
struct Cli {
    /// JSON file with default settings; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clean/noisy cube pairs and a manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        bands: usize,
        /// Atoms of the generating dictionary
        #[arg(long = "gen-atoms", default_value_t = 64)]
        gen_atoms: usize,
        /// Atoms per scene region
        #[arg(long = "scene-sparsity", default_value_t = 3)]
        scene_sparsity: usize,
        /// Spatial length-scale of the regions in pixels
        #[arg(long, default_value_t = 16.0)]
        smoothness: f64,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Learn a dictionary with KSVD from the clean cubes of a manifest
    LearnDict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subsample to at most this many spectra (0 keeps all)
        #[arg(long = "max-samples", default_value_t = 50_000)]
        max_samples: usize,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Pretrain the denoiser on (noisy, clean) block pairs
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSONL log of epoch losses
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// End-to-end DU or DEQ training
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Dictionary checkpoint
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Pretrained denoiser checkpoint
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Output checkpoint; read back with --resume
        #[arg(long)]
        out: PathBuf,
        /// JSONL log, one line per optimizer step
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue the run stored in --out
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Denoise one cube
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Clean cube; prints a metric report when given
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Metrics table (method, sigma, psnr, ssim, sam) over a manifest
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Model checkpoint, optionally as NAME=PATH; repeatable
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Also report the noisy input, batch OMP and FISTA lasso
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Mean PSNR over a manifest at several iteration budgets
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated budgets
        #[arg(long, value_delimiter = ',', required = true)]
        iters: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
}

fn parse_model(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => (String::new(), PathBuf::from(spec)),
    }
}

fn run(cli: Cli) -> deqsc::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(deqsc::Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| deqsc::Error::Config(e.to_string()))?;
    }
    let file = match &cli.config {
        Some(p) => Tuning::from_file(p)?,
        None => Tuning::default(),
    };
    let layered = |t: &Tuning| t.over(&file);
    match cli.command {
        Command::Synth {
            out,
            count,
            height,
            width,
            bands,
            gen_atoms,
            scene_sparsity,
            smoothness,
            tuning,
        } => commands::synth(
            &SynthArgs {
                out,
                count,
                height,
                width,
                bands,
                gen_atoms,
                scene_sparsity,
                smoothness,
            },
            &layered(&tuning),
        ),
        Command::LearnDict {
            manifest,
            out,
            max_samples,
            tuning,
        } => commands::learn_dict(&manifest, &out, max_samples, &layered(&tuning)),
        Command::Pretrain {
            manifest,
            out,
            log,
            tuning,
        } => commands::cmd_pretrain(&manifest, &out, log.as_deref(), &layered(&tuning)),
        Command::Train {
            manifest,
            dict,
            denoiser,
            out,
            log,
            resume,
            tuning,
        } => commands::cmd_train(
            &TrainArgs {
                manifest: &manifest,
                dict: dict.as_deref(),
                denoiser: denoiser.as_deref(),
                out: &out,
                log: log.as_deref(),
                resume,
            },
            &layered(&tuning),
        ),
        Command::Denoise {
            model,
            input,
            output,
            reference,
            tuning,
        } => commands::cmd_denoise(&model, &input, &output, reference.as_deref(), &layered(&tuning)),
        Command::Eval {
            manifest,
            models,
            baselines,
            out,
            tuning,
        } => {
            let models: Vec<_> = models.iter().map(|m| parse_model(m)).collect();
            commands::cmd_eval(&manifest, &models, baselines, &out, &layered(&tuning))
        }
        Command::Sweep {
            manifest,
            model,
            iters,
            out,
            tuning,
        } => commands::cmd_sweep(&manifest, Path::new(&model), &iters, &out, &layered(&tuning)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                deqsc::Error::Config(_) | deqsc::Error::Precondition(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
