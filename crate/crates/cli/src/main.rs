//! Command-line front end: one subcommand per run mode, all driven by a TOML
//! configuration file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osmix::pipeline::{run, Mode, RunConfig, TEMPLATE};

#[derive(Parser)]
#[command(name = "osmix", version, about = "Auction mixtures from two consecutive order statistics")]
struct Cli {
    /// Print a commented configuration with all defaults and exit.
    #[arg(long)]
    emit_template: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
#[command(rename_all = "snake_case")]
enum Command {
    /// Simulate a dataset from the configured design.
    Simulate(RunArgs),
    /// Estimate the number of states.
    EstimateK(RunArgs),
    /// Identify state distributions with a known number of bidders.
    Identify(RunArgs),
    /// Identify states and competition with an unobserved number of bidders.
    IdentifyUnknownN(RunArgs),
    /// Bernstein sieve maximum likelihood.
    SieveFit(RunArgs),
    /// Replicated simulation and estimation.
    Montecarlo(RunArgs),
    /// Noise-free identification on the design's population functionals.
    OracleCheck(RunArgs),
    /// Run the mode named in the configuration file.
    Run(RunArgs),
}

impl Command {
    fn split(self) -> (Option<Mode>, RunArgs) {
        match self {
            Command::Simulate(a) => (Some(Mode::Simulate), a),
            Command::EstimateK(a) => (Some(Mode::EstimateK), a),
            Command::Identify(a) => (Some(Mode::Identify), a),
            Command::IdentifyUnknownN(a) => (Some(Mode::IdentifyUnknownN), a),
            Command::SieveFit(a) => (Some(Mode::SieveFit), a),
            Command::Montecarlo(a) => (Some(Mode::Montecarlo), a),
            Command::OracleCheck(a) => (Some(Mode::OracleCheck), a),
            Command::Run(a) => (None, a),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.emit_template {
        print!("{TEMPLATE}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand or --emit-template is required (see --help)");
        return ExitCode::from(2);
    };
    let (mode, args) = command.split();
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        if mode.is_some() {
            cfg.mode = mode;
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = args.out_dir {
            cfg.out_dir = dir;
        }
        run(&cfg)
    });
    match result {
        Ok(bundle) => {
            for file in &bundle.files {
                println!("{}", file.display());
            }
            log::info!("summary: {}", bundle.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
