use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowinv_cli::{execute, CliError, Command, Invocation};

#[derive(Parser)]
#[command(name = "flowinv", version, about = "Rectified-flow inversion and editing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fixed_point.iterations=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root; defaults to $FLOWINV_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set seeds=N`.
    #[arg(long)]
    seeds: Option<usize>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write samples of a synthetic dataset.
    GenData(Common),
    /// Train a velocity field and evaluate its samples.
    Train(Common),
    /// Two-stage inversion with trajectory, compensation and diagnostics exports.
    Invert(Common),
    /// Inversion followed by compensated regeneration.
    Reconstruct(Common),
    /// AdaLN-controlled edit of a single batch or of seeded factor-B trials.
    Edit(Common),
    /// Naive Euler against naive DDIM inversion round-trip curves.
    CompareDdim(Common),
    /// Attention-injection sweep over injection fractions.
    SweepAttn(Common),
    /// Property benchmarks: iteration sweep, linear oracle, gradient check, S sweep.
    Bench(Common),
}

fn invocation(cmd: Cmd) -> Invocation {
    let (command, c) = match cmd {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Invert(c) => (Command::Invert, c),
        Cmd::Reconstruct(c) => (Command::Reconstruct, c),
        Cmd::Edit(c) => (Command::Edit, c),
        Cmd::CompareDdim(c) => (Command::CompareDdim, c),
        Cmd::SweepAttn(c) => (Command::SweepAttn, c),
        Cmd::Bench(c) => (Command::Bench, c),
    };
    Invocation { command, config: c.config, overrides: c.set, out: c.out, seeds: c.seeds, force: c.force }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CliError::USAGE } else { CliError::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(&invocation(cli.command)) {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", summary.run_dir.display());
            for row in &summary.metrics {
                let _ = writeln!(out, "  {} = {} {}", row.metric, row.value, row.units);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
