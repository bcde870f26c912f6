//! Configuration-driven front end: verification suites and experiments with
//! reproducible on-disk artifacts (manifest, CSV metrics, text summary).

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{CliError, ResolvedConfig};

#[derive(Parser)]
#[command(name = "slas", about = "Advantage-shaping numerical laboratory", version)]
struct Cli {
    /// TOML config file; a manifest from a previous run also works
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for manifest, CSV, and summary
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,
    /// Dotted-path override, e.g. --set params.group_size=16 (last wins)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: CommandName,
}

#[derive(Clone, Copy, Subcommand)]
enum CommandName {
    /// Std-estimator bias: closed form vs Monte-Carlo
    VerifyBias,
    /// Simplex ascent oracles: closed forms vs brute-force QP
    VerifyOracle,
    /// Shaped-gradient KL trust-region bound on softmax families
    VerifyTrustRegion,
    /// GRPO training loop on the synthetic reward
    Train,
    /// StdGRPO vs SLAS reward-hacking comparison
    HackCompare,
    /// Admissible shaping exponent from a trust-region budget
    GammaBound,
}

impl CommandName {
    fn as_str(self) -> &'static str {
        match self {
            CommandName::VerifyBias => "verify-bias",
            CommandName::VerifyOracle => "verify-oracle",
            CommandName::VerifyTrustRegion => "verify-trust-region",
            CommandName::Train => "train",
            CommandName::HackCompare => "hack-compare",
            CommandName::GammaBound => "gamma-bound",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let resolved = match ResolvedConfig::load(
        cli.command.as_str(),
        cli.config.as_deref(),
        cli.seed,
        cli.out.as_deref(),
        &cli.sets,
    ) {
        Ok(r) => r,
        Err(e) => return report(e),
    };
    let outcome = match cli.command {
        CommandName::VerifyBias => commands::verify_bias(&resolved),
        CommandName::VerifyOracle => commands::verify_oracle(&resolved),
        CommandName::VerifyTrustRegion => commands::verify_trust_region(&resolved),
        CommandName::Train => commands::train(&resolved),
        CommandName::HackCompare => commands::hack_compare(&resolved),
        CommandName::GammaBound => commands::gamma_bound(&resolved),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
