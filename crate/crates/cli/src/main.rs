use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use declab_cli::{
    check_constants_report, compress_bench_report, least_constants, read_config, run_experiment,
    search_constants_report, spectral_report, CliError,
};
use declab_core::{Compressor, GraphKind};

#[derive(Parser)]
#[command(name = "declab", version, about = "Decentralized optimization with compressed communication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print rho, C and the spectrum of a topology's mixing matrix.
    Spectral {
        /// Take the topology from this experiment config.
        #[arg(long, conflicts_with_all = ["kind", "n", "p"])]
        config: Option<PathBuf>,
        #[arg(long)]
        kind: Option<GraphKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check rate constants against the feasibility inequalities.
    CheckConstants {
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
        #[arg(long)]
        c3: Option<f64>,
        #[arg(long)]
        c4: Option<f64>,
        #[arg(long)]
        c_gamma: Option<f64>,
        #[arg(long)]
        c_eta: Option<f64>,
        /// Spectral constant C of the mixing matrix.
        #[arg(long = "C", value_name = "C")]
        big_c: f64,
        /// Condition number; selects the PL system.
        #[arg(long)]
        kappa: Option<f64>,
        /// Search c_gamma, c_eta over powers of two instead of checking.
        #[arg(long)]
        search: bool,
        #[arg(long, default_value_t = 12)]
        max_k: u32,
    },
    /// Measure a compressor's contraction on Gaussian vectors.
    CompressBench {
        #[arg(long)]
        compressor: Compressor,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cmd: Command) -> Result<bool, CliError> {
    match cmd {
        Command::Run { config, seed, output } => {
            let cfg = read_config(&config)?;
            let report = run_experiment(&cfg, seed, output)?;
            let last = report.rows.last().map_or(0, |r| r.round);
            println!(
                "wrote {} rows (last round {last}) to {}; metadata in {}",
                report.rows.len(),
                report.csv.display(),
                report.metadata.display()
            );
            Ok(true)
        }
        Command::Spectral { config, kind, n, p, seed } => {
            let (kind, n, p, seed) = match config {
                Some(path) => {
                    let cfg = read_config(&path)?;
                    (cfg.topology.kind, cfg.topology.n, cfg.topology.p, seed.unwrap_or(cfg.seed))
                }
                None => {
                    let kind = kind.ok_or_else(|| CliError::Config("--kind is required without --config".into()))?;
                    let n = n.ok_or_else(|| CliError::Config("--n is required without --config".into()))?;
                    (kind, n, p, seed.unwrap_or(0))
                }
            };
            print!("{}", spectral_report(kind, n, p, seed)?);
            Ok(true)
        }
        Command::CheckConstants { c1, c2, c3, c4, c_gamma, c_eta, big_c, kappa, search, max_k } => {
            let (ok, report) = if search {
                search_constants_report(big_c, kappa, max_k)
            } else {
                let cg = c_gamma.ok_or_else(|| CliError::Config("--c-gamma is required without --search".into()))?;
                let ce = c_eta.ok_or_else(|| CliError::Config("--c-eta is required without --search".into()))?;
                let consts = match (c1, c2, c3, c4) {
                    (Some(a), Some(b), Some(c), Some(d)) => [a, b, c, d],
                    (None, None, None, None) => match least_constants(cg, ce, big_c, kappa) {
                        Some(found) => {
                            println!("c1..c4 = {found:?}");
                            found
                        }
                        None => {
                            println!("no c1..c4 satisfy the system for these c_gamma, c_eta\nINFEASIBLE");
                            return Ok(false);
                        }
                    },
                    _ => return Err(CliError::Config("give all of --c1..--c4 or none".into())),
                };
                check_constants_report(consts, cg, ce, big_c, kappa)
            };
            print!("{report}");
            Ok(ok)
        }
        Command::CompressBench { compressor, d, trials, seed } => {
            let (ok, report) = compress_bench_report(&compressor, d, trials, seed)?;
            print!("{report}");
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
