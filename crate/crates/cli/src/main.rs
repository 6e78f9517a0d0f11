use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdo_cli::report::report;
use pdo_cli::run::run;
use pdo_cli::spec::{parse_seeds, RunSpec};
use pdo_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "pdo", version, about = "Population training with phasic diversity optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SpecArgs {
    /// JSON run spec; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run, e.g. `0,1,2` or `0..5`. Overrides the spec.
    #[arg(long)]
    seeds: Option<String>,
    /// Step-budget scale factor. Overrides the spec.
    #[arg(long)]
    scale: Option<f64>,
    /// Run on one thread in a fixed order.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write run directories plus summary.json.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Render curves and archive heatmaps from finished runs.
    Report {
        /// Run directories, or directories of `seed-*` runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Check a spec and print the resolved per-seed configs.
    Validate {
        #[command(flatten)]
        spec: SpecArgs,
    },
}

fn load_spec(args: &SpecArgs) -> Result<RunSpec> {
    let mut spec = match &args.config {
        Some(p) => RunSpec::from_file(p)?,
        None => RunSpec::from_json("{}")?,
    };
    if let Some(s) = &args.seeds {
        spec.seeds = parse_seeds(s)?;
    }
    if let Some(scale) = args.scale {
        spec.config.scale = scale;
    }
    spec.config.deterministic |= args.deterministic;
    spec.validate()?;
    Ok(spec)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { spec, out } => {
            let spec = load_spec(&spec)?;
            let agg = run(&spec, &out, |seed, dir| eprintln!("seed {seed} -> {}", dir.display()))?;
            print_json(&agg);
        }
        Command::Report { runs, out } => {
            let files = report(&runs, &out)?;
            print_json(&files.written);
        }
        Command::Validate { spec } => {
            let spec = load_spec(&spec)?;
            print_json(&spec.configs()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let result = match Cli::try_parse() {
        Ok(cli) => execute(cli),
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => Err(CliError::Usage(e.to_string().trim().to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
