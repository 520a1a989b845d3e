use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lsmcmc_harness::config::ExperimentConfig;
use lsmcmc_harness::convergence::{convergence_study, write_convergence_csv};
use lsmcmc_harness::experiment::run_experiment;
use lsmcmc_harness::metric::{error_metric, read_means_csv};

#[derive(Parser)]
#[command(name = "lsmcmc", version, about = "Run filtering experiments")]
struct Cli {
    /// Base seed of the replica filter seeds (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every filter in a config and write the result files.
    Run { config: PathBuf },
    /// Percentage of entries of two mean files closer than a threshold.
    Metric {
        filter: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 0.025)]
        threshold: f64,
    },
    /// Error of the plain filter against the Kalman means for several N.
    Convergence {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [250usize, 1000, 4000, 16000])]
        n: Vec<usize>,
    },
}

fn load(cli: &Cli, path: &PathBuf) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.experiment.base_seed = s;
        cfg.experiment.seeds = None;
    }
    if let Some(o) = &cli.out {
        cfg.experiment.out = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.experiment.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(&cli, config)?;
            let (_, result) = run_experiment(&cfg)?;
            for f in &result.filters {
                println!(
                    "{:<8} M={:<3} wall {:>9.2} s  {:>7.3}% below {}",
                    f.filter.name(),
                    f.replicas.len(),
                    f.wall_s,
                    f.pct_below_threshold,
                    result.threshold
                );
            }
            println!("results in {}", cfg.experiment.out.display());
        }
        Command::Metric {
            filter,
            reference,
            threshold,
        } => {
            let a = read_means_csv(filter)?;
            let b = read_means_csv(reference)?;
            println!("{:.4}", error_metric(&a, &b, *threshold)?);
        }
        Command::Convergence { config, n } => {
            let cfg = load(&cli, config)?;
            let table = convergence_study(&cfg, n)?;
            std::fs::create_dir_all(&cfg.experiment.out)?;
            let path = cfg.experiment.out.join("convergence.csv");
            write_convergence_csv(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            for r in &table.rows {
                println!("N = {:>6}  rmse {:.4e}  averaged {:.4e}", r.n, r.rmse, r.averaged_rmse);
            }
            println!("fitted slope {:.4}", table.slope);
        }
    }
    Ok(())
}
