use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridrec_cli::{CliError, ExperimentConfig, Run};

#[derive(Parser)]
#[command(name = "hybridrec", version, about = "Category/locality expert recommenders with score fusion")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip stages and checkpoints already recorded in the run manifest.
    #[arg(long, global = true)]
    resume: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset or ingest the configured files.
    Generate,
    /// Label articles of unknown locality with the configured model.
    Label,
    /// Train unified baselines and per-segment experts.
    Train,
    /// Train the fusion network over each expert registry.
    Fuse,
    /// Evaluate every model and write reports.
    Evaluate,
    /// Print the stored comparison tables.
    Report,
    /// Run generate, label, train, fuse and evaluate, then print the report.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut run = Run::open(cfg, cli.resume)?;
    run.quiet = cli.quiet;
    match cli.command {
        Command::Generate => run.generate(),
        Command::Label => {
            let s = run.label()?;
            if s.unknown > 0 {
                println!("{} labeled, {} failed", s.labeled, s.failures.len());
            }
            Ok(())
        }
        Command::Train => run.train(),
        Command::Fuse => run.fuse(),
        Command::Evaluate => {
            run.evaluate()?;
            print!("{}", run.report()?);
            Ok(())
        }
        Command::Report => {
            print!("{}", run.report()?);
            Ok(())
        }
        Command::Run => {
            run.run_all()?;
            print!("{}", run.report()?);
            Ok(())
        }
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
