use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvnsim_cli::{check, parse_scenario, resources, run, scaling, CliError, RunOptions, RunReport};

#[derive(Parser)]
#[command(name = "kvnsim", version, about = "Koopman-von Neumann simulation of classical dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write outputs.
    Run(Common),
    /// Validate a scenario and print it with defaults resolved.
    Check(Common),
    /// Print quantum and Monte Carlo cost estimates.
    Resources(Common),
    /// Run only the sampling study.
    Scaling(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

fn configure_threads() {
    if let Ok(v) = std::env::var("KVNSIM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring KVNSIM_THREADS={v}: expected a positive integer"),
        }
    }
}

fn print_report(report: &RunReport, quiet: bool) {
    if !quiet {
        println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
    } else {
        println!("{}", report.status);
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Check(c) => {
            let s = check(&c.config)?;
            println!("OK");
            if !c.quiet {
                println!("{}", s.resolved_json());
            }
            Ok(0)
        }
        Command::Run(c) => {
            let (s, opts) = load(&c)?;
            let report = run(&s, &opts)?;
            print_report(&report, c.quiet);
            Ok(report.exit_code())
        }
        Command::Resources(c) => {
            let (s, opts) = load(&c)?;
            let report = resources(&s, &opts)?;
            if c.quiet {
                println!("{}", report.status);
            } else {
                println!("{}", serde_json::to_string_pretty(&report.resources).expect("serializes"));
            }
            Ok(report.exit_code())
        }
        Command::Scaling(c) => {
            let (s, opts) = load(&c)?;
            let report = scaling(&s, &opts)?;
            print_report(&report, c.quiet);
            Ok(report.exit_code())
        }
    }
}

fn load(c: &Common) -> Result<(kvnsim_cli::Scenario, RunOptions), CliError> {
    let s = parse_scenario(&c.config)?;
    Ok((
        s,
        RunOptions {
            out: c.out.clone(),
            seed: c.seed,
            quiet: c.quiet,
        },
    ))
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
