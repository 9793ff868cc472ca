use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbtt_lab::commands;
use sbtt_lab::config::ExperimentConfig;
use sbtt_lab::experiments;

/// Experiment runner for latent-dynamics models trained with selective
/// backpropagation through time.
#[derive(Parser)]
#[command(name = "sbtt-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(subcommand)]
        kind: SynthCommand,
    },
    /// Apply the configured sampling schedule to a stored batch.
    Mask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear dynamical system with SBTT gradient descent.
    TrainLds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sequential autoencoder on a stored batch.
    TrainSeqae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a checkpoint's encoders on a sparser batch (dynamics frozen).
    RetrainEncoder {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior-mean inference: rates and factors for a stored batch.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric tables between a prediction tensor and a truth tensor.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated subset of r2, pr2, coherence.
        #[arg(long, default_value = "r2")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random-drop robustness sweep.
    SweepDrop {
        #[arg(long)]
        config: PathBuf,
    },
    /// Staggered-sampling super-resolution sweep over Lorenz speeds.
    SweepSuperres {
        #[arg(long)]
        config: PathBuf,
    },
    /// Encoder-retraining sweep.
    SweepRetrain {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Lorenz-driven Poisson spiking (electrophysiology-style benchmark).
    LorenzPoisson {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lorenz-driven simulated two-photon calcium dataset.
    LorenzCalcium {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("SBTT_THREADS") {
        let n: usize = value
            .parse()
            .map_err(|_| anyhow::anyhow!("SBTT_THREADS must be a positive integer, got {value:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn check_synth_kind(cfg: &ExperimentConfig, want: sbtt_lab::config::SynthKind) -> anyhow::Result<()> {
    use anyhow::Context;
    let kind = cfg.synth.as_ref().context("config needs a [synth] section")?.kind;
    if kind != want {
        anyhow::bail!("config [synth] kind is {kind:?}, but the subcommand expects {want:?}");
    }
    Ok(())
}

fn run() -> anyhow::Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { kind } => match kind {
            SynthCommand::LorenzPoisson { config, out } => {
                let cfg = ExperimentConfig::load(&config)?;
                check_synth_kind(&cfg, sbtt_lab::config::SynthKind::LorenzPoisson)?;
                commands::cmd_synth(&cfg, &out)
            }
            SynthCommand::LorenzCalcium { config, out } => {
                let cfg = ExperimentConfig::load(&config)?;
                check_synth_kind(&cfg, sbtt_lab::config::SynthKind::LorenzCalcium)?;
                commands::cmd_synth(&cfg, &out)
            }
        },
        Command::Mask { config, input, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_mask(&cfg, &input, &out)
        }
        Command::TrainLds { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_train_lds(&cfg, &out)
        }
        Command::TrainSeqae { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_train_seqae(&cfg, &data, &out)
        }
        Command::RetrainEncoder { from, config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_retrain_encoder(&cfg, &from, &data, &out)
        }
        Command::Infer { ckpt, data, out } => commands::cmd_infer(&ckpt, &data, &out),
        Command::Eval { config, pred, truth, metrics, out } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => toml::from_str("seed = 0")?,
            };
            commands::cmd_eval(&cfg, &pred, &truth, &metrics, &out)
        }
        Command::SweepDrop { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = experiments::experiment_root(&cfg, "drop-sweep");
            let cells = experiments::run_drop_sweep(&cfg, &root)?;
            for c in &cells {
                println!("fraction {:.2}: r2 {:.4}, recon nll {:.4}", c.fraction, c.r2, c.recon_nll);
            }
            Ok(())
        }
        Command::SweepSuperres { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = experiments::experiment_root(&cfg, "superres-sweep");
            let cells = experiments::run_superres(&cfg, &root)?;
            for c in &cells {
                println!(
                    "factor {} ({:.2} Hz): sbtt {:.4}, frame {:.4}, smooth {:.4}",
                    c.factor, c.peak_hz, c.r2_sbtt, c.r2_frame, c.r2_smooth
                );
            }
            Ok(())
        }
        Command::SweepRetrain { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = experiments::experiment_root(&cfg, "retrain-sweep");
            let cells = experiments::run_retraining(&cfg, &root)?;
            for c in &cells {
                println!(
                    "fraction {:.2}: full {:.4}, sparse {:.4}, retrained {:.4}",
                    c.fraction, c.r2_trained_full, c.r2_trained_sparse, c.r2_retrained
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
