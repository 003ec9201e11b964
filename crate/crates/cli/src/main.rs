use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedlora_core::config::DEFAULTS_HELP;
use fedlora_core::{
    compare_decomposition, emit_plots_data, parse_config, run_experiment, run_sweep,
    write_comparison_csv, CellSummary, Error, ExperimentConfig, Strategy,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fedlora",
    version,
    about = "Federated LoRA aggregation experiments",
    after_help = DEFAULTS_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) cell of a config.
    Run(RunArgs),
    /// Run the config at every point of its [sweep] grid.
    Sweep(RunArgs),
    /// Time truncated SVD, Gram-Schmidt and the coefficient solver on one round of uploads.
    CompareDecomposition(RunArgs),
    /// Aggregate a run or sweep directory into median-over-seeds CSVs.
    EmitPlotsData(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, value_name = "DIR", env = "FEDLORA_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_name = "CSV", value_delimiter = ',')]
    seeds: Option<Vec<String>>,
    /// Comma-separated strategies replacing the config's list.
    #[arg(long, value_name = "CSV", value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Print the resolved config and planned cells without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Run or sweep directory; defaults to the config's output directory.
    run_dir: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR", env = "FEDLORA_OUT")]
    out: Option<PathBuf>,
}

fn config_error(field: &str, message: String) -> Error {
    Error::ConfigValidation {
        field: field.to_string(),
        message,
    }
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    if !args.config.is_file() {
        return Err(config_error(
            "--config",
            format!("{} is not a file", args.config.display()),
        )
        .into());
    }
    let mut config = parse_config(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| config_error("--seeds", format!("{s:?}: {e}")))
            })
            .collect::<std::result::Result<_, _>>()?;
    }
    if let Some(names) = &args.strategies {
        config.strategies = names
            .iter()
            .map(|s| {
                s.parse::<Strategy>()
                    .map_err(|e| config_error("--strategies", e.to_string()))
            })
            .collect::<std::result::Result<_, _>>()?;
    }
    if config.seeds.is_empty() || config.strategies.is_empty() {
        return Err(
            config_error("--seeds", "seeds and strategies must not be empty".into()).into(),
        );
    }
    if args.threads == Some(0) {
        return Err(config_error("--threads", "must be ≥ 1".into()).into());
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());
    config.output_dir = out.clone();
    Ok((config, out))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(f)),
        None => Ok(f()),
    }
}

fn dry_run(config: &ExperimentConfig, sweep: bool) -> Result<()> {
    let mut stdout = io::stdout().lock();
    write!(stdout, "{}", config.to_toml()?)?;
    writeln!(stdout, "\n# cells")?;
    for cell in config.cells() {
        writeln!(stdout, "# {}", cell.dir_name())?;
    }
    if sweep {
        writeln!(stdout, "# sweep points (clients, dirichlet_alpha)")?;
        for (u, a) in config.sweep_points() {
            writeln!(stdout, "# {u} {a}")?;
        }
    }
    Ok(())
}

fn report(summaries: &[CellSummary], out: &Path) {
    for s in summaries {
        println!(
            "{:<9} seed {:<4} U={:<3} alpha={:<6} global={:.4} gen_gap={:.4} divergence={:.4e} down_bytes={}",
            s.strategy.name(),
            s.seed,
            s.clients,
            s.dirichlet_alpha,
            s.final_global_metric,
            s.tail_gen_gap,
            s.final_divergence,
            s.total_down_bytes
        );
    }
    println!("artifacts in {}", out.display());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (config, out) = load(&args)?;
            if args.dry_run {
                return dry_run(&config, false);
            }
            let summaries = with_threads(args.threads, || run_experiment(&config, &out))??;
            report(&summaries, &out);
        }
        Command::Sweep(args) => {
            let (config, out) = load(&args)?;
            if args.dry_run {
                return dry_run(&config, true);
            }
            let summaries = with_threads(args.threads, || run_sweep(&config, &out))??;
            report(&summaries, &out);
        }
        Command::CompareDecomposition(args) => {
            let (config, out) = load(&args)?;
            if args.dry_run {
                return dry_run(&config, false);
            }
            let seed = config.seeds[0];
            let rows = with_threads(args.threads, || compare_decomposition(&config, seed))??;
            fs::create_dir_all(&out)?;
            let path = out.join("decomposition.csv");
            write_comparison_csv(&rows, fs::File::create(&path)?)?;
            write_comparison_csv(&rows, io::stdout().lock())?;
            println!("written {}", path.display());
        }
        Command::EmitPlotsData(args) => {
            let dir = match (args.run_dir, args.out, args.config) {
                (Some(dir), _, _) | (None, Some(dir), _) => dir,
                (None, None, Some(config)) => parse_config(&config)?.output_dir,
                (None, None, None) => {
                    return Err(config_error(
                        "run_dir",
                        "give a run directory, --out or --config".into(),
                    )
                    .into())
                }
            };
            for path in emit_plots_data(&dir)? {
                println!("written {}", path.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        Some(e) if e.is_numeric_failure() => EXIT_NUMERIC,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
