use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ps2_core::agents::AlgorithmTag;
use ps2_core::envgen::{generate_multitask_with, GeneratorOptions, ProblemSpec};
use ps2_core::harness::{
    emit_outputs, emit_summary, run_experiment, summarize, traces_from_csv, ExperimentConfig,
    SummaryStats,
};
use ps2_core::policy::IdsMode;
use ps2_core::Ps2Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ps2",
    version,
    about = "Posterior state-abstraction sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a bandit instance (or multi-task suite) as JSON.
    Generate(GenerateArgs),
    /// Run an experiment and write traces.csv, summary.json and regret.svg.
    Run(RunArgs),
    /// Recompute summary.json and regret.svg from an existing traces.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    num_states: usize,
    #[arg(long, default_value_t = 10)]
    num_actions: usize,
    #[arg(long, default_value_t = 5)]
    latent_rank: usize,
    /// With more than one task the output is a suite sharing one abstraction.
    #[arg(long, default_value_t = 1)]
    num_tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force every abstract state to own at least one ground state.
    #[arg(long)]
    cover_abstract_states: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration. Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated algorithm names, e.g. PS2-IDS,Random.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    #[arg(long)]
    ids_mode: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    num_seeds: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// A traces.csv file or a directory containing one.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to the directory holding the input traces.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => generate(args),
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Ps2Error::Io { .. } => ExitCode::from(EXIT_IO),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Ps2Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| Ps2Error::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn generate(args: GenerateArgs) -> Result<(), Ps2Error> {
    let spec = ProblemSpec::new(args.num_states, args.num_actions, args.latent_rank)
        .with_tasks(args.num_tasks);
    let options = GeneratorOptions {
        cover_abstract_states: args.cover_abstract_states,
    };
    let suite = generate_multitask_with(&spec, args.seed, &options)?;
    let json = if args.num_tasks == 1 {
        suite.task(0).to_json()?
    } else {
        suite.to_json()?
    };
    write_output(args.out.as_deref(), &json)
}

fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, Ps2Error> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        config.jobs = jobs;
    }
    if let Some(names) = &args.algorithms {
        let tags = names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| n.parse::<AlgorithmTag>())
            .collect::<Result<Vec<_>, _>>()?;
        config.algorithms = Some(tags);
    }
    if let Some(mode) = &args.ids_mode {
        config.ids_mode = mode.parse::<IdsMode>()?;
    }
    if let Some(h) = args.horizon {
        config.horizon = Some(h);
    }
    if let Some(n) = args.num_seeds {
        config.num_seeds = n;
    }
    config.validate()?;
    Ok(config)
}

fn print_final_table(summary: &SummaryStats) {
    println!(
        "{:<22} {:>6} {:>14} {:>12}",
        "algorithm", "seeds", "final_regret", "ci95"
    );
    for a in &summary.algorithms {
        println!(
            "{:<22} {:>6} {:>14.3} {:>12.3}{}",
            a.algorithm,
            a.num_seeds,
            a.final_mean(),
            a.final_half_width(),
            if a.single_seed_warning {
                "  (single seed)"
            } else {
                ""
            }
        );
    }
}

fn run(args: RunArgs) -> Result<(), Ps2Error> {
    let config = resolve_config(&args)?;
    let traces = run_experiment(&config)?;
    let summary = summarize(&traces)?;
    let files = emit_outputs(Some(&config), &traces, &summary, &config.out_dir)?;
    print_final_table(&summary);
    eprintln!("wrote {}", files.traces_csv.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Ps2Error> {
    let csv_path = if args.input.is_dir() {
        args.input.join("traces.csv")
    } else {
        args.input.clone()
    };
    let text = fs::read_to_string(&csv_path).map_err(|source| Ps2Error::Io {
        path: csv_path.display().to_string(),
        source,
    })?;
    let traces = traces_from_csv(&text)?;
    let summary = summarize(&traces)?;
    let out_dir = match args.out {
        Some(dir) => dir,
        None => csv_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    emit_summary(None, &summary, &out_dir)?;
    print_final_table(&summary);
    Ok(())
}
