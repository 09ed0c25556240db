//! The `hft` command line: training rounds, continual runs, metrics, Half-Reset
//! merges, drift analysis and runtime ladders.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hft_core::analysis::Norm;
use hft_core::tasks::TaskKind;
use hft_core::Strategy;

pub use commands::{cmd_analyze, cmd_bench, cmd_clrun, cmd_merge, cmd_metrics, cmd_train, MetricsReport};
pub use config::{ExperimentConfig, MaskKind, Overrides};

#[derive(Debug, Parser)]
#[command(name = "hft", version, about = "Selective fine-tuning and continual-learning experiments")]
pub struct Cli {
    /// Worker threads for evaluation; results do not depend on it.
    #[arg(long, global = true, env = config::ENV_THREADS)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mask: Option<MaskKind>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Freeze EMB and HEAD as well.
    #[arg(long)]
    pub freeze_io: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides HFT_OUT_DIR and the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunFlags {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            mask: self.mask,
            ratio: self.ratio,
            freeze_io: self.freeze_io,
            seed: self.seed,
            out: self.out.clone(),
        };
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One training round with the requested plan.
    Train {
        #[command(flatten)]
        flags: RunFlags,
        /// Task to train on; defaults to the first suite task.
        #[arg(long)]
        task: Option<TaskKind>,
    },
    /// Sequential run over the task suite for every configured seed.
    Clrun {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// OP and BWT of an eval-matrix CSV.
    Metrics {
        csv: PathBuf,
        /// Round to score; defaults to the last.
        #[arg(long)]
        t: Option<usize>,
    },
    /// Half-Reset a fine-tuned checkpoint towards its base.
    Merge {
        #[arg(long)]
        ft: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value = "category")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reset EMB and HEAD too.
        #[arg(long)]
        reset_io: bool,
        #[arg(long, default_value = ".", env = config::ENV_OUT_DIR)]
        out: PathBuf,
    },
    /// Variation CSVs of a final checkpoint against its base.
    Analyze {
        #[arg(long = "final")]
        final_ckpt: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Paired FFT checkpoint for the baseline column.
        #[arg(long)]
        fft: Option<PathBuf>,
        #[arg(long, default_value = "mean_abs")]
        norm: Norm,
        #[arg(long, default_value = ".", env = config::ENV_OUT_DIR)]
        out: PathBuf,
    },
    /// Wall time of one round across a ladder of trainable ratios.
    Bench {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        ratios: Vec<f64>,
    },
}

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Numerical = 3,
    Io = 4,
}

fn classify_core(err: &hft_core::Error) -> ExitKind {
    use hft_core::Error as E;
    match err {
        E::NonFinite { .. } | E::NonFiniteTraining { .. } => ExitKind::Numerical,
        E::Checkpoint { kind: hft_core::CheckpointError::NanTensor { .. }, .. } => ExitKind::Numerical,
        E::Aborted { source, .. } => classify_core(source),
        E::Io(_) | E::Json(_) | E::Csv(_) | E::Checkpoint { .. } => ExitKind::Io,
        _ => ExitKind::Config,
    }
}

pub fn classify(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hft_core::Error>() {
            return classify_core(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitKind::Io;
        }
    }
    ExitKind::Config
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train { flags, task } => {
            let cfg = flags.resolve()?;
            let s = cmd_train(&cfg, task)?;
            println!(
                "trained {} for {} steps, exact match {:.1}, layers trainable {:.4}, total trainable {:.4}",
                s.task,
                s.steps,
                s.score,
                s.stats.layers.fraction(),
                s.stats.total.fraction()
            );
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Clrun { flags } => {
            let cfg = flags.resolve()?;
            for s in cmd_clrun(&cfg)? {
                let t = s.metrics.op.len();
                let bwt = s.metrics.bwt[t - 1].map_or("-".to_string(), |b| format!("{b:.2}"));
                println!("seed {}: OP {:.2} BWT {bwt} ({})", s.seed, s.metrics.op[t - 1], s.dir.display());
            }
        }
        Command::Metrics { csv, t } => {
            let r = cmd_metrics(&csv, t)?;
            let bwt = r.bwt.map_or("-".to_string(), |b| format!("{b:.4}"));
            println!("t={} OP={:.4} BWT={bwt}", r.t, r.op);
        }
        Command::Merge { ft, base, strategy, seed, reset_io, out } => {
            print_json(&cmd_merge(&ft, &base, strategy, seed, reset_io, &out)?)?;
        }
        Command::Analyze { final_ckpt, base, fft, norm, out } => {
            print_json(&cmd_analyze(&final_ckpt, &base, fft.as_deref(), norm, &out)?)?;
        }
        Command::Bench { flags, ratios } => {
            let cfg = flags.resolve()?;
            println!("trainable_pct,wall_ms,wall_pct_of_fft");
            for r in cmd_bench(&cfg, &ratios)? {
                println!("{:.1},{:.3},{:.1}", r.trainable_pct, r.wall_ms, r.wall_pct_of_fft);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_kinds() {
        let nan = anyhow::Error::new(hft_core::Error::NonFinite { op: "matmul" });
        assert_eq!(classify(&nan), ExitKind::Numerical);
        let io = anyhow::Error::new(std::io::Error::other("disk")).context("writing");
        assert_eq!(classify(&io), ExitKind::Io);
        assert_eq!(classify(&anyhow::anyhow!("bad flag")), ExitKind::Config);
        let cfg = anyhow::Error::new(hft_core::Error::InvalidConfig("d_model".into()));
        assert_eq!(classify(&cfg), ExitKind::Config);
    }
}
