use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use social_topology::cli::rank_scan::parse_range;
use social_topology::cli::{exit, rank_scan, run_experiment, validate_config, RankTable, ScanModel, ScanSpec};

#[derive(Parser)]
#[command(
    name = "social-topology",
    version,
    about = "Social learning over weak graphs and topology inference from beliefs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, infer and write all outputs.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the simulation seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check a config file and report every problem.
    Validate { config: PathBuf },
    /// Tabulate rank(C) over random model draws.
    RankScan {
        #[arg(long, default_value = "gaussian")]
        model: ScanModel,
        /// Inclusive sender range, `A:B`.
        #[arg(long = "s-range", value_parser = parse_range, default_value = "2:4")]
        senders: std::ops::RangeInclusive<usize>,
        /// Inclusive hypothesis range, `A:B`.
        #[arg(long = "h-range", value_parser = parse_range, default_value = "2:6")]
        hypotheses: std::ops::RangeInclusive<usize>,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = social_topology::topology_inference::DEFAULT_RANK_TOL)]
        rank_tol: f64,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match validate_config(&config) {
            Ok(cfg) => {
                println!(
                    "ok: H={} S={} R={} steps={} trials={}",
                    cfg.hypotheses,
                    cfg.num_senders(),
                    cfg.receiving_sizes.len(),
                    cfg.simulation.steps,
                    cfg.simulation.trials
                );
                code(exit::OK)
            }
            Err(e) => {
                eprintln!("{e}");
                code(exit::CONFIG)
            }
        },
        Command::Run {
            config,
            out,
            seed_override,
        } => {
            let mut cfg = match validate_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return code(exit::CONFIG);
                }
            };
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            if let Some(seed) = seed_override {
                cfg.simulation.seed = seed;
            }
            match run_experiment(&cfg) {
                Ok(report) => {
                    for a in &report.summary.receiving {
                        let err = a.median_l_inf.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into());
                        println!(
                            "agent {:>3}  theta* {:>4}  rank {}  {:<16}  median l_inf {}",
                            a.agent,
                            a.theta_star.map(|t| t.to_string()).unwrap_or_else(|| "tie".into()),
                            a.rank,
                            a.status,
                            err
                        );
                    }
                    println!("outputs in {}", report.output_dir.display());
                    if report.summary.all_identifiable {
                        code(exit::OK)
                    } else {
                        code(exit::NON_IDENTIFIABLE)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(exit::RUNTIME)
                }
            }
        }
        Command::RankScan {
            model,
            senders,
            hypotheses,
            draws,
            seed,
            rank_tol,
            json,
        } => {
            let rows = rank_scan(&ScanSpec {
                model,
                senders,
                hypotheses,
                draws,
                seed,
                rank_tol,
            });
            if json {
                match serde_json::to_string_pretty(&rows) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return code(exit::RUNTIME);
                    }
                }
            } else {
                print!("{}", RankTable(&rows));
            }
            code(exit::OK)
        }
    }
}
