//! `mdtx`: run experiment suites and check recorded traces.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mdtx_core::harness::{self, Overrides, EXIT_CONFIG};
use mdtx_core::proposer::Mutations;
use mdtx_core::types::Protocol;

#[derive(Parser)]
#[command(name = "mdtx", version, about = "Paxos / Paxos-CP datastore simulator and serializability checker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutation {
    /// Combine transactions without checking reads against earlier writes.
    Combine,
    /// Promote without checking reads against the winners' writes.
    Promote,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in suite or a TOML suite file.
    Run {
        /// Suite name or path to a suite file.
        #[arg(long)]
        suite: String,
        /// Directory for per-run JSON, failing traces and the aggregate CSV.
        #[arg(long)]
        out: PathBuf,
        /// First seed (default: the suite's seed list).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds to run.
        #[arg(long)]
        seeds: Option<usize>,
        /// Only run cells using this protocol.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Message loss probability for every cell.
        #[arg(long)]
        loss: Option<f64>,
        /// Maximum promotions per transaction.
        #[arg(long)]
        promotion_cap: Option<u32>,
        /// Disable a safety check to confirm the checker notices.
        #[arg(long)]
        mutation: Option<Mutation>,
        /// Transactions per run.
        #[arg(long)]
        txns: Option<usize>,
    },
    /// Check a JSON-lines trace for one-copy serializability.
    Verify {
        #[arg(long)]
        trace: PathBuf,
        /// Also search all serial orders (small traces only).
        #[arg(long)]
        brute_force: bool,
    },
    /// List the built-in suites.
    Suites,
}

fn run(cli: Cli) -> Result<i32, harness::HarnessError> {
    match cli.command {
        Command::Run { suite, out, seed, seeds, protocol, loss, promotion_cap, mutation, txns } => {
            let mutations = mutation.map(|m| match m {
                Mutation::Combine => Mutations { skip_combine_check: true, ..Mutations::default() },
                Mutation::Promote => Mutations { skip_promote_check: true, ..Mutations::default() },
            });
            let overrides =
                Overrides { seed, seed_count: seeds, protocol, loss, promotion_cap, mutations, total_txns: txns };
            let spec = overrides.apply(harness::load_suite(&suite)?)?;
            let report = harness::run_suite(&spec, Some(&out))?;
            println!(
                "{:<24} {:>2} {:>5} {:>8} {:>8} {:>7} {:>6} {:>9}  rounds",
                "cell", "D", "attrs", "commits", "aborts", "unavail", "combos", "mean ms"
            );
            for row in &report.rows {
                let rounds: Vec<String> = row.rounds().iter().map(|r| format!("{r:.1}")).collect();
                println!(
                    "{:<24} {:>2} {:>5} {:>8.1} {:>8.1} {:>7.1} {:>6.1} {:>9.1}  {}",
                    row.label,
                    row.datacenters,
                    row.attrs,
                    row.commits,
                    row.aborts,
                    row.unavailable,
                    row.combinations,
                    row.mean_latency_ms,
                    rounds.join(" ")
                );
            }
            for bad in report.violations() {
                eprintln!("violation in {} seed {}:", bad.label, bad.seed);
                for v in &bad.verdict.violations {
                    eprintln!("  {} {} witness={}", v.property, v.description, v.witness);
                }
                for b in &bad.parity.breaches {
                    eprintln!("  message parity: {b}");
                }
            }
            if let Some(path) = &report.csv_path {
                println!("wrote {}", path.display());
            }
            Ok(report.exit_code())
        }
        Command::Verify { trace, brute_force } => {
            let report = harness::verify_trace(&trace, brute_force)?;
            println!("{}", serde_json::to_string_pretty(&report.verdict).expect("verdict serializes"));
            match &report.brute_force {
                Some(Ok(v)) => println!("brute force: {}", if v.ok { "serializable" } else { "no serial order found" }),
                Some(Err(e)) => eprintln!("brute force skipped: {e}"),
                None => {}
            }
            Ok(report.exit_code())
        }
        Command::Suites => {
            for name in harness::BUILTIN_SUITES {
                let suite = harness::builtin_suite(name).expect("listed suites exist");
                println!("{name}: {} cells, seeds {:?}", suite.cells.len(), suite.seeds);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    debug_assert!(code == 0 || code == 1 || code == EXIT_CONFIG);
    ExitCode::from(code as u8)
}
