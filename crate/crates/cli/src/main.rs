use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dia_core::harness::{self, parse_sweep, ExperimentConfig, DEFAULT_GRID_STEPS};
use dia_core::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "dia", version, about = "Diffusion-dissolving contrastive anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, figures and manifests.
    #[arg(long, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Dotted config override, e.g. `--set dia.epochs=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> dia_core::Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::read(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise-prediction network used for dissolving.
    TrainDiffusion(Common),
    /// Render originals next to their dissolved versions.
    DissolveGrid {
        #[command(flatten)]
        common: Common,
        /// Denoiser checkpoint directory; defaults to the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated timesteps, one column each.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRID_STEPS)]
        t: Vec<usize>,
        /// Number of test images, one row each.
        #[arg(long, default_value_t = 4)]
        rows: usize,
    },
    /// Train the encoder with the contrastive and shift-classification objective.
    TrainDia(Common),
    /// Score the test split and report AUROC.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint directory; defaults to the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one run per combination of sweep values.
    GridSearch {
        #[command(flatten)]
        common: Common,
        /// `KEY=[V1, V2, ...]` with TOML literals, e.g. `dia.lr=[0.1, 0.01]`. Repeatable.
        #[arg(long)]
        sweep: Vec<String>,
    },
}

fn run(cli: Cli) -> dia_core::Result<()> {
    match cli.command {
        Command::TrainDiffusion(c) => {
            let cfg = c.resolve()?;
            let out = harness::train_diffusion(&cfg, &c.run_dir)?;
            println!("denoiser: {}", out.display());
        }
        Command::DissolveGrid {
            common,
            checkpoint,
            t,
            rows,
        } => {
            let cfg = common.resolve()?;
            let out = harness::dissolve_grid_command(
                &cfg,
                &common.run_dir,
                checkpoint.as_deref(),
                &t,
                rows,
            )?;
            println!("grid: {}", out.display());
        }
        Command::TrainDia(c) => {
            let cfg = c.resolve()?;
            let out = harness::train_dia(&cfg, &c.run_dir)?;
            println!("encoder: {}", out.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let report = harness::eval(&cfg, &common.run_dir, checkpoint.as_deref())?;
            match report.summary.auroc {
                Some(a) => println!("auroc: {a:.4}"),
                None => println!("auroc: undefined"),
            }
        }
        Command::GridSearch { common, sweep } => {
            let cfg = common.resolve()?;
            let sweep = sweep
                .iter()
                .map(|s| parse_sweep(s))
                .collect::<dia_core::Result<Vec<_>>>()?;
            for row in harness::grid_search(&cfg, &sweep, &common.run_dir)? {
                println!("{:.4}\trun-{:03}\t{}", row.auroc, row.run, row.overrides);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
