//! Command-line surface for the latent subdomain PDE solver pipeline:
//! `gen-data`, `train`, `solve`, `eval`, `bench`, `stability`, `ablate`.
//!
//! Exit code 0 on success; on failure one machine-readable line
//! `error: <tag>: <message>` goes to stderr and the exit code is 1.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use latsolve::config::RunConfig;
use latsolve::pipeline;

#[derive(Parser)]
#[command(name = "latsolve", version, about = "Latent subdomain surrogate solver for 2D PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`key = value` sections); defaults are built in.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> latsolve::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default_for(latsolve::config::ProblemKind::Laplace),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn resolve_optional(&self) -> latsolve::Result<Option<RunConfig>> {
        match (&self.config, self.seed) {
            (None, None) => Ok(None),
            _ => self.resolve().map(Some),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample random problems, solve them with the FDM oracle, write a dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder stack from a dataset directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output model-bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a single case directory with a trained bundle.
    Solve {
        /// Model-bundle directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Case directory (bc.txt plus optional source/obstacle/snapshots).
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Initialization: zero | oracle | coarse:<n> | noisy:<frac>.
        #[arg(long, default_value = "zero")]
        init: String,
        /// Transient rollout length (transient bundles only).
        #[arg(long)]
        steps: Option<usize>,
        /// Emit SVG heatmaps.
        #[arg(long)]
        plots: bool,
    },
    /// Evaluate a bundle over a dataset's test split (metrics.csv).
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: bool,
    },
    /// Time the oracle against the latent solver; runs the coupling study and
    /// optionally the subdomain-size ablation.
    Bench {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subdomain sizes for the ablation (e.g. 4,8,16).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Robustness study over random initializations.
    Stability {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of test cases to sweep.
        #[arg(long, default_value_t = 5)]
        cases: usize,
    },
    /// Train and compare bundles across subdomain sizes.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        sizes: Vec<usize>,
    },
}

fn run(cli: Cli) -> latsolve::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let stats = pipeline::cmd_gen_data(&cfg, &out)?;
            println!(
                "gen-data: {} cases written, {} skipped -> {}",
                stats.written,
                stats.skipped,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let report = pipeline::cmd_train(&data, &out, config.resolve_optional()?)?;
            print!("{}", report.to_text());
            println!("train: bundle written to {}", out.display());
        }
        Command::Solve {
            bundle,
            case,
            out,
            init,
            steps,
            plots,
        } => {
            pipeline::cmd_solve(&bundle, &case, &out, &init, steps, plots)?;
            println!("solve: outputs written to {}", out.display());
        }
        Command::Eval {
            bundle,
            data,
            out,
            plots,
        } => {
            let outcome = pipeline::cmd_eval(&bundle, &data, &out, plots)?;
            let n = outcome.rows.len().max(1) as f64;
            let mean_mae = outcome.rows.iter().map(|r| r.mae).sum::<f64>() / n;
            let mean_iters = outcome.rows.iter().map(|r| r.iters).sum::<usize>() as f64 / n;
            println!(
                "eval: {} cases, mean MAE {mean_mae:.3e}, mean iters {mean_iters:.1} -> {}",
                outcome.rows.len(),
                out.display()
            );
        }
        Command::Bench {
            bundle,
            data,
            out,
            sizes,
        } => {
            pipeline::cmd_bench(&bundle, &data, &out, &sizes)?;
            println!("bench: reports written to {}", out.display());
        }
        Command::Stability {
            bundle,
            data,
            out,
            cases,
        } => {
            let report = pipeline::cmd_stability(&bundle, &data, &out, cases)?;
            println!(
                "stability: {} runs over {} cases, all converged: {} -> {}",
                report.total_runs(),
                report.cases.len(),
                report.all_converged(),
                out.display()
            );
        }
        Command::Ablate { data, out, sizes } => {
            let rows = pipeline::cmd_ablate(&data, &out, &sizes)?;
            for r in &rows {
                println!(
                    "ablate s={}: mean MAE {:.3e}, mean solve {:.1} ms, mean iters {:.1}",
                    r.s, r.mean_mae, r.mean_solve_millis, r.mean_iters
                );
            }
            println!("ablate: report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}: {err}", err.tag());
            ExitCode::FAILURE
        }
    }
}
