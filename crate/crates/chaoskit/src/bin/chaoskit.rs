//! Command-line front end: loads an experiment configuration, sizes the
//! worker pool, dispatches to the harness and prints a short summary.
//!
//! Thread count resolution: `--threads` flag, else the `CHAOSKIT_THREADS`
//! environment variable, else 1 (fully serial). Results are identical for
//! any worker count; the knob only trades wall-clock time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chaoskit::harness::{run, ExperimentConfig};

#[derive(Parser)]
#[command(name = "chaoskit", version, about = "Mean-field particle system laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed from the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: CHAOSKIT_THREADS env var, else 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Contraction constants and hypothesis report.
    Constants(CommonArgs),
    /// Particle-system trajectories or moment summaries.
    Simulate(CommonArgs),
    /// Reflection coupling between decoupled diffusions.
    Couple(CommonArgs),
    /// Generalized Gronwall bound evaluation.
    Gronwall(CommonArgs),
    /// Law-of-large-numbers gap measurement.
    Lln(CommonArgs),
    /// Duhamel semigroup-difference residual.
    Duhamel(CommonArgs),
    /// Dispatch on the "kind" field of the configuration.
    Run(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Constants(a)
            | Command::Simulate(a)
            | Command::Couple(a)
            | Command::Gronwall(a)
            | Command::Lln(a)
            | Command::Duhamel(a)
            | Command::Run(a) => a,
        }
    }

    /// Kind forced by the subcommand; `None` means "use the config field".
    fn forced_kind(&self) -> Option<&'static str> {
        match self {
            Command::Constants(_) => Some("constants"),
            Command::Simulate(_) => Some("simulate"),
            Command::Couple(_) => Some("couple"),
            Command::Gronwall(_) => Some("gronwall"),
            Command::Lln(_) => Some("lln"),
            Command::Duhamel(_) => Some("duhamel"),
            Command::Run(_) => None,
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    if let Some(t) = flag {
        return t.max(1);
    }
    if let Ok(env) = std::env::var("CHAOSKIT_THREADS") {
        if let Ok(t) = env.trim().parse::<usize>() {
            return t.max(1);
        }
    }
    1
}

fn real_main() -> chaoskit::Result<()> {
    let cli = Cli::parse();
    let args = cli.command.args();
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(kind) = cli.command.forced_kind() {
        cfg.kind = kind.to_string();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let threads = resolve_threads(args.threads);
    let record = run(&cfg, &out_dir, threads)?;

    println!("experiment : {}", record.kind);
    println!("out dir    : {}", out_dir.display());
    println!("threads    : {threads}");
    println!("wall clock : {:.2}s", record.wall_seconds);
    for (name, digest) in &record.digests {
        println!("artifact   : {name}  sha256 {digest}");
    }
    match serde_json::to_string_pretty(&record.summary) {
        Ok(text) => println!("summary    :\n{text}"),
        Err(_) => println!("summary    : <unavailable>"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("chaoskit: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
