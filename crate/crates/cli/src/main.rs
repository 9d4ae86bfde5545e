use std::path::PathBuf;
use std::process::ExitCode;

use ambiflow_cli::{self as cli, CliError, RunConfig};
use clap::{Parser, Subcommand};

/// Multi-hypothesis 3D pose lifting with a conditional normalizing flow.
#[derive(Parser)]
#[command(name = "ambiflow", version)]
struct Args {
    /// Config file (`key = value` lines); may be repeated.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Fraction of samples with occluded joints.
        #[arg(long)]
        occlusion: Option<f64>,
        /// Also write the joint heatmap windows of the first samples.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Fit a Gaussian to every heatmap of a heatmap file.
    FitHeatmaps {
        #[arg(long)]
        heatmaps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the flow and the pose critic.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample hypotheses for every sample of a dataset.
    Sample {
        /// Model file or checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hypotheses per sample.
        #[arg(short = 'm', long = "hypotheses")]
        m: Option<usize>,
        /// Use the zero latent for every hypothesis.
        #[arg(long)]
        z0_only: bool,
    },
    /// Evaluate a hypothesis file against a dataset.
    Eval {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only samples with a fitted σ above the ambiguity threshold.
        #[arg(long)]
        ambiguous_only: bool,
        /// Compare against z₀ plus heatmap noise.
        #[arg(long)]
        noise_baseline: bool,
    },
    /// Charts (SVG plus CSV) from a training history and/or an eval directory.
    Plot {
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(args: &Args, extra: &[(&str, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    for path in &args.config {
        cfg.load(path)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    // Subcommand flags are more specific than `--set`.
    for (k, v) in extra {
        cfg.set(k, v, "command line")?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.finish()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<(), CliError> {
    cli::init_threads()?;
    match &args.command {
        Command::Gen { out, occlusion, heatmaps } => {
            let extra: Vec<_> = occlusion.map(|o| ("data.occlusion", o.to_string())).into_iter().collect();
            let cfg = config(&args, &extra)?;
            let s = cli::cmd_gen(&cfg, out, *heatmaps)?;
            println!(
                "wrote {} samples to {}: {} with occlusion ({} joints), {} ambiguous",
                s.samples,
                out.join("dataset.bin").display(),
                s.occluded_samples,
                s.occluded_joints,
                s.ambiguous
            );
        }
        Command::FitHeatmaps { heatmaps, out } => {
            let cfg = config(&args, &[])?;
            let n = cli::cmd_fit_heatmaps(&cfg, heatmaps, out)?;
            println!("fitted {n} heatmaps into {}", out.join("fits.csv").display());
        }
        Command::Train { data, out, epochs, resume } => {
            let extra: Vec<_> = epochs.map(|e| ("train.epochs", e.to_string())).into_iter().collect();
            let cfg = config(&args, &extra)?;
            let history = cli::cmd_train(&cfg, data, out, resume.as_deref(), |epoch, steps| {
                let n = steps.len().max(1) as f64;
                let mean = |f: fn(&ambiflow::trainer::StepReport) -> f64| steps.iter().map(f).sum::<f64>() / n;
                println!(
                    "epoch {epoch}: total {:.4} l2d {:.4} mmd {:.5} det {:.4} mb {:.4} hm {:.5} gen {:.4}",
                    mean(|s| s.losses.total),
                    mean(|s| s.losses.l2d),
                    mean(|s| s.losses.mmd),
                    mean(|s| s.losses.det),
                    mean(|s| s.losses.mb),
                    mean(|s| s.losses.hm),
                    mean(|s| s.losses.gen)
                );
            })?;
            println!("trained {} steps; outputs in {}", history.len(), out.display());
        }
        Command::Sample { model, data, out, m, z0_only } => {
            let mut extra: Vec<_> = m.map(|m| ("sample.m", m.to_string())).into_iter().collect();
            if *z0_only {
                extra.push(("sample.z0_only", "true".into()));
            }
            let cfg = config(&args, &extra)?;
            let rows = cli::cmd_sample(&cfg, model, data, out)?;
            println!("wrote {rows} poses to {}", out.join("hypotheses.csv").display());
        }
        Command::Eval { hypotheses, data, out, ambiguous_only, noise_baseline } => {
            let mut extra = Vec::new();
            if *ambiguous_only {
                extra.push(("eval.ambiguous_only", "true".to_string()));
            }
            if *noise_baseline {
                extra.push(("eval.noise_baseline", "true".to_string()));
            }
            let cfg = config(&args, &extra)?;
            let report = cli::cmd_eval(&cfg, hypotheses, data, out)?;
            let mut stdout = std::io::stdout().lock();
            report.write_summary(&mut stdout).map_err(|source| CliError::Io { path: "<stdout>".into(), source })?;
        }
        Command::Plot { history, report, out } => {
            let p = cli::cmd_plot(history.as_deref(), report.as_deref(), out)?;
            for f in p.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
